//! Result tables. Each table is a CSV file whose first line is a fixed
//! header; `schema_version` is the first column of every row so old and new
//! rows stay distinguishable. Tables only ever grow: rows are appended and
//! a file with a different header is refused.

use std::fmt::Write;

use c2mf::benchmark::Metrics;
use serde::{Deserialize, Serialize};

use crate::config::ResolvedConfig;

pub const SCHEMA_VERSION: u32 = 1;

pub const RESULTS_HEADER: &str = "schema_version,config_hash,seed,checkpoint_sha256,method,regime,lambda_test,\
num_instances,num_corrupted,accuracy,macro_precision,macro_recall,macro_f1,rmis,mean_csic\n";

pub const METRICS_HEADER: &str = "schema_version,config_hash,seed,checkpoint_sha256,method,regime,dataset,\
num_instances,num_corrupted,accuracy,macro_precision,macro_recall,macro_f1,rmis,mean_csic\n";

pub const RMIS_HEADER: &str = "schema_version,config_hash,seed,method,lambda_test,modality,rmis,num_corrupted\n";

/// Evaluation of one checkpoint on one dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// The dataset name for `eval`, or the conflict level for `sweep`.
    pub dataset: String,
    pub lambda_test: Option<f64>,
    pub num_instances: usize,
    pub num_corrupted: usize,
    pub metrics: Metrics,
    /// Mean CSIC of each modality over the dataset.
    pub mean_csic: Vec<f64>,
}

/// Identifies the run that produced a set of rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunIdentity {
    pub config_hash: String,
    pub seed: u64,
    pub checkpoint_sha256: String,
    pub method: String,
    pub regime: String,
}

/// One line of a JSON-lines sidecar: everything needed to reproduce the
/// rows written next to it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub schema_version: u32,
    pub command: String,
    pub identity: RunIdentity,
    pub config: ResolvedConfig,
    pub evaluations: Vec<Evaluation>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn joined(v: &[f64]) -> String {
    v.iter().map(f64::to_string).collect::<Vec<_>>().join(";")
}

fn common_tail(out: &mut String, e: &Evaluation) {
    let c = &e.metrics.classification;
    writeln!(
        out,
        "{},{},{},{},{},{},{},{}",
        e.num_instances,
        e.num_corrupted,
        c.accuracy,
        c.macro_precision,
        c.macro_recall,
        c.macro_f1,
        opt(e.metrics.rmis.as_ref().map(|r| r.overall)),
        joined(&e.mean_csic)
    )
    .expect("writing to a String");
}

fn identity_prefix(id: &RunIdentity) -> String {
    format!(
        "{SCHEMA_VERSION},{},{},{},{},{},",
        id.config_hash, id.seed, id.checkpoint_sha256, id.method, id.regime
    )
}

/// Rows of the sweep results table.
pub fn results_rows(id: &RunIdentity, evals: &[Evaluation]) -> String {
    let mut out = String::new();
    for e in evals {
        out.push_str(&identity_prefix(id));
        out.push_str(&opt(e.lambda_test));
        out.push(',');
        common_tail(&mut out, e);
    }
    out
}

/// Rows of the per-dataset metrics table.
pub fn metrics_rows(id: &RunIdentity, evals: &[Evaluation]) -> String {
    let mut out = String::new();
    for e in evals {
        out.push_str(&identity_prefix(id));
        out.push_str(&e.dataset);
        out.push(',');
        common_tail(&mut out, e);
    }
    out
}

/// Plot-ready RMIS rows: one per conflict level for all modalities
/// together (`modality = all`) and one per modality.
pub fn rmis_rows(id: &RunIdentity, evals: &[Evaluation]) -> String {
    let mut out = String::new();
    for e in evals {
        let Some(r) = &e.metrics.rmis else { continue };
        let lambda = opt(e.lambda_test);
        let mut row = |modality: &str, value: Option<f64>| {
            writeln!(
                out,
                "{SCHEMA_VERSION},{},{},{},{lambda},{modality},{},{}",
                id.config_hash,
                id.seed,
                id.method,
                opt(value),
                r.num_corrupted
            )
            .expect("writing to a String");
        };
        row("all", Some(r.overall));
        for (m, v) in r.by_modality.iter().enumerate() {
            row(&m.to_string(), *v);
        }
    }
    out
}

/// A row of the results table read back for analysis.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultRecord {
    pub config_hash: String,
    pub seed: u64,
    pub method: String,
    pub regime: String,
    pub lambda_test: f64,
    pub accuracy: f64,
    pub rmis: Option<f64>,
}

/// Parses a results table written by `sweep`.
pub fn parse_results(text: &str) -> Result<Vec<ResultRecord>, String> {
    let mut lines = text.lines();
    if lines.next() != Some(RESULTS_HEADER.trim_end()) {
        return Err("not a results table of this schema".into());
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            let bad = |what: &str| format!("row {}: bad {what}", i + 1);
            if f.len() != 15 {
                return Err(bad("column count"));
            }
            let num = |s: &str, what: &str| s.parse::<f64>().map_err(|_| bad(what));
            Ok(ResultRecord {
                config_hash: f[1].to_string(),
                seed: f[2].parse().map_err(|_| bad("seed"))?,
                method: f[4].to_string(),
                regime: f[5].to_string(),
                lambda_test: num(f[6], "lambda_test")?,
                accuracy: num(f[9], "accuracy")?,
                rmis: if f[13].is_empty() { None } else { Some(num(f[13], "rmis")?) },
            })
        })
        .collect()
}
