//! Columnar text format for datasets.
//!
//! ```text
//! # c2mf-dataset v1
//! # num_classes=10
//! # dims=8,8
//! label,provenance,corrupted_modality,source_class,donor_class,x0_0,...,x1_7
//! 3,clean,,,,0.25,...
//! 5,corrupted,0,5,2,-1.5,...
//! ```
//!
//! Feature `x{m}_{j}` is dimension `j` of modality `m`. Floats are written in
//! shortest round-trip form, so reading and re-writing is bit-exact.

use std::io::Write;
use std::path::Path;

use thiserror::Error;

use super::{ConflictDataset, Instance, Provenance};

pub const DATASET_MAGIC: &str = "# c2mf-dataset v1";

#[derive(Debug, Error)]
pub enum DatasetFormatError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
    #[error("bad dataset header: {0}")]
    Header(String),
    #[error("record {record}: {message}")]
    Record { record: usize, message: String },
}

fn column_names(dims: &[usize]) -> Vec<String> {
    let mut cols: Vec<String> = ["label", "provenance", "corrupted_modality", "source_class", "donor_class"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for (m, &d) in dims.iter().enumerate() {
        cols.extend((0..d).map(|j| format!("x{m}_{j}")));
    }
    cols
}

pub fn write<W: Write>(dataset: &ConflictDataset, mut out: W) -> Result<(), DatasetFormatError> {
    writeln!(out, "{DATASET_MAGIC}")?;
    writeln!(out, "# num_classes={}", dataset.num_classes)?;
    let dims: Vec<String> = dataset.dims.iter().map(|d| d.to_string()).collect();
    writeln!(out, "# dims={}", dims.join(","))?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(column_names(&dataset.dims))?;
    for inst in &dataset.instances {
        let mut rec = vec![inst.label.to_string()];
        match inst.provenance {
            Provenance::Clean => rec.extend(["clean".into(), String::new(), String::new(), String::new()]),
            Provenance::Corrupted {
                modality,
                source_class,
                donor_class,
            } => rec.extend([
                "corrupted".into(),
                modality.to_string(),
                source_class.to_string(),
                donor_class.to_string(),
            ]),
        }
        for f in &inst.features {
            rec.extend(f.iter().map(|x| format!("{x:?}")));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn to_string(dataset: &ConflictDataset) -> String {
    let mut buf = Vec::new();
    write(dataset, &mut buf).expect("writing to memory cannot fail");
    String::from_utf8(buf).expect("dataset text is UTF-8")
}

fn header_value<'a>(line: Option<&'a str>, key: &str) -> Result<&'a str, DatasetFormatError> {
    line.and_then(|l| l.strip_prefix("# "))
        .and_then(|l| l.strip_prefix(key))
        .and_then(|l| l.strip_prefix('='))
        .ok_or_else(|| DatasetFormatError::Header(format!("expected `# {key}=...`")))
}

pub fn parse(text: &str) -> Result<ConflictDataset, DatasetFormatError> {
    let mut lines = text.splitn(4, '\n');
    if lines.next().map(str::trim_end) != Some(DATASET_MAGIC) {
        return Err(DatasetFormatError::Header(format!("missing `{DATASET_MAGIC}` line")));
    }
    let num_classes: usize = header_value(lines.next(), "num_classes")?
        .trim()
        .parse()
        .map_err(|e| DatasetFormatError::Header(format!("num_classes: {e}")))?;
    let dims_text = header_value(lines.next(), "dims")?.trim();
    let dims: Vec<usize> = if dims_text.is_empty() {
        Vec::new()
    } else {
        dims_text
            .split(',')
            .map(|d| d.parse())
            .collect::<Result<_, _>>()
            .map_err(|e| DatasetFormatError::Header(format!("dims: {e}")))?
    };
    let body = lines.next().unwrap_or("");
    let mut reader = csv::ReaderBuilder::new().from_reader(body.as_bytes());
    let expected = column_names(&dims);
    let got: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if got != expected {
        return Err(DatasetFormatError::Header("column names do not match dims".into()));
    }
    let mut ds = ConflictDataset::new(num_classes, dims.clone());
    for (record, row) in reader.records().enumerate() {
        let row = row?;
        let err = |message: String| DatasetFormatError::Record { record, message };
        let int = |i: usize| -> Result<usize, DatasetFormatError> {
            row[i].parse().map_err(|e| err(format!("column {}: {e}", expected[i])))
        };
        let label = int(0)?;
        if label >= num_classes {
            return Err(err(format!("label {label} out of range")));
        }
        let provenance = match &row[1] {
            "clean" => Provenance::Clean,
            "corrupted" => {
                let modality = int(2)?;
                if modality >= dims.len() {
                    return Err(err(format!("modality {modality} out of range")));
                }
                Provenance::Corrupted {
                    modality,
                    source_class: int(3)?,
                    donor_class: int(4)?,
                }
            }
            other => return Err(err(format!("unknown provenance `{other}`"))),
        };
        let mut col = 5;
        let mut features = Vec::with_capacity(dims.len());
        for &d in &dims {
            let f: Vec<f64> = (col..col + d)
                .map(|i| row[i].parse::<f64>().map_err(|e| err(format!("column {}: {e}", expected[i]))))
                .collect::<Result<_, _>>()?;
            features.push(f);
            col += d;
        }
        ds.instances.push(Instance {
            features,
            label,
            provenance,
        });
    }
    Ok(ds)
}

pub fn write_file(dataset: &ConflictDataset, path: impl AsRef<Path>) -> Result<(), DatasetFormatError> {
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write(dataset, file)
}

pub fn read_file(path: impl AsRef<Path>) -> Result<ConflictDataset, DatasetFormatError> {
    parse(&std::fs::read_to_string(path)?)
}
