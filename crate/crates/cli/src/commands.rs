use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use c2mf::benchmark::format as dataset_format;
use c2mf::benchmark::{
    apply_conflict, classification_metrics, corrupt_splits, generate_splits, rmis, ConflictDataset,
    DatasetSplits, Metrics, SplitStream,
};
use c2mf::training::{gradient_check, train};
use c2mf::FusionModel;
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::ResolvedConfig;
use crate::output::Staged;
use crate::results::{
    metrics_rows, results_rows, rmis_rows, Evaluation, RunIdentity, Sidecar, METRICS_HEADER, RESULTS_HEADER,
    RMIS_HEADER, SCHEMA_VERSION,
};
use crate::CliError;

pub const TRAIN_FILE: &str = "train.csv";
pub const VALIDATION_FILE: &str = "validation.csv";
pub const TEST_FILE: &str = "test.csv";
pub const CLEAN_TEST_FILE: &str = "clean-test.csv";
pub const DATASET_SIDECAR: &str = "dataset.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const RUN_LOG_FILE: &str = "run-log.json";
pub const RESULTS_FILE: &str = "results.csv";
pub const RESULTS_SIDECAR: &str = "results.jsonl";
pub const RMIS_FILE: &str = "rmis.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const METRICS_SIDECAR: &str = "metrics.jsonl";

/// Scalars checked per parameter group by `grad-check`.
const GRAD_CHECK_SAMPLES: usize = 50;
const GRAD_CHECK_BATCH: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    GenData,
    Train,
    Eval,
    Sweep,
    GradCheck,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Sweep => "sweep",
            Command::GradCheck => "grad-check",
        }
    }
}

/// What a successful command produced.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Outcome {
    pub written: Vec<PathBuf>,
    /// Human-readable summary for the terminal.
    pub message: String,
}

pub fn run(command: Command, cfg: &ResolvedConfig) -> Result<Outcome, CliError> {
    match command {
        Command::GenData => gen_data(cfg),
        Command::Train => train_command(cfg),
        Command::Eval => eval_command(cfg),
        Command::Sweep => sweep_command(cfg),
        Command::GradCheck => grad_check_command(cfg),
    }
}

/// Training, validation and test splits at the configured conflict levels,
/// plus the clean test split that sweeps corrupt from scratch.
pub struct LoadedData {
    pub splits: DatasetSplits,
    pub clean_test: ConflictDataset,
}

fn generate(cfg: &ResolvedConfig) -> Result<LoadedData, CliError> {
    let clean = generate_splits(&cfg.synthetic)?;
    let splits = corrupt_splits(&clean, &cfg.conflict)?;
    Ok(LoadedData {
        splits,
        clean_test: clean.test,
    })
}

/// Reads the dataset directory, or regenerates the data when none is set.
pub fn load_data(cfg: &ResolvedConfig) -> Result<LoadedData, CliError> {
    let Some(dir) = &cfg.data else {
        return generate(cfg);
    };
    let read = |name: &str| -> Result<ConflictDataset, CliError> {
        let path = dir.join(name);
        dataset_format::read_file(&path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    };
    Ok(LoadedData {
        splits: DatasetSplits {
            train: read(TRAIN_FILE)?,
            validation: read(VALIDATION_FILE)?,
            test: read(TEST_FILE)?,
        },
        clean_test: read(CLEAN_TEST_FILE)?,
    })
}

fn json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("artifacts serialize");
    s.push('\n');
    s
}

fn short_sha(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))[..16].to_string()
}

#[derive(Serialize)]
struct DatasetManifest<'a> {
    schema_version: u32,
    config_hash: String,
    seed: u64,
    config: &'a ResolvedConfig,
    sizes: [(&'static str, usize, usize); 4],
}

fn gen_data(cfg: &ResolvedConfig) -> Result<Outcome, CliError> {
    let data = generate(cfg)?;
    let s = &data.splits;
    let mut staged = Staged::new();
    for (name, ds) in [
        (TRAIN_FILE, &s.train),
        (VALIDATION_FILE, &s.validation),
        (TEST_FILE, &s.test),
        (CLEAN_TEST_FILE, &data.clean_test),
    ] {
        staged.write(cfg.out.join(name), dataset_format::to_string(ds).as_bytes())?;
    }
    let manifest = DatasetManifest {
        schema_version: SCHEMA_VERSION,
        config_hash: cfg.hash(),
        seed: cfg.seed,
        config: cfg,
        sizes: [
            ("train", s.train.len(), s.train.num_corrupted()),
            ("validation", s.validation.len(), s.validation.num_corrupted()),
            ("test", s.test.len(), s.test.num_corrupted()),
            ("clean-test", data.clean_test.len(), 0),
        ],
    };
    staged.write(cfg.out.join(DATASET_SIDECAR), json(&manifest).as_bytes())?;
    let written = staged.commit()?;
    Ok(Outcome {
        message: format!(
            "wrote {} train / {} validation / {} test instances ({} / {} / {} corrupted) to {}",
            s.train.len(),
            s.validation.len(),
            s.test.len(),
            s.train.num_corrupted(),
            s.validation.num_corrupted(),
            s.test.num_corrupted(),
            cfg.out.display()
        ),
        written,
    })
}

#[derive(Serialize)]
struct RunLog<'a> {
    schema_version: u32,
    config_hash: String,
    seed: u64,
    config: &'a ResolvedConfig,
    checkpoint: &'a Path,
    checkpoint_sha256: String,
    report: &'a c2mf::TrainReport,
}

fn train_command(cfg: &ResolvedConfig) -> Result<Outcome, CliError> {
    let data = load_data(cfg)?;
    let method = cfg.train.method;
    let (model, report) = train(&data.splits, &cfg.model_config(method), &cfg.train)?;
    let checkpoint = model.to_checkpoint_json();
    let checkpoint_path = cfg.out.join(CHECKPOINT_FILE);
    let log = RunLog {
        schema_version: SCHEMA_VERSION,
        config_hash: cfg.hash(),
        seed: cfg.seed,
        config: cfg,
        checkpoint: &checkpoint_path,
        checkpoint_sha256: short_sha(checkpoint.as_bytes()),
        report: &report,
    };
    let mut staged = Staged::new();
    staged.write(&checkpoint_path, checkpoint.as_bytes())?;
    staged.write(cfg.out.join(RUN_LOG_FILE), json(&log).as_bytes())?;
    let written = staged.commit()?;
    let best = report
        .best_epochs
        .iter()
        .map(|(p, e)| format!("{p}: {}", e.map_or("initial".to_string(), |e| format!("epoch {e}"))))
        .collect::<Vec<_>>()
        .join(", ");
    Ok(Outcome {
        message: format!(
            "trained {method} ({:?}) for {} epochs in {:.1}s; kept {best}",
            cfg.train.regime,
            report.epochs.len(),
            report.wall_clock_seconds
        ),
        written,
    })
}

fn checkpoint_path(cfg: &ResolvedConfig) -> PathBuf {
    cfg.checkpoint
        .clone()
        .unwrap_or_else(|| cfg.out.join(CHECKPOINT_FILE))
}

fn load_checkpoint(cfg: &ResolvedConfig) -> Result<(FusionModel, String), CliError> {
    let path = checkpoint_path(cfg);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| CliError::io(format!("cannot read checkpoint {}", path.display()), e))?;
    let model =
        FusionModel::from_checkpoint_json(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok((model, short_sha(text.as_bytes())))
}

/// Metrics, RMIS and mean credibility of `model` on `dataset`.
pub fn evaluate_dataset(
    model: &FusionModel,
    dataset: &ConflictDataset,
    name: &str,
    lambda_test: Option<f64>,
) -> Result<Evaluation, CliError> {
    if dataset.is_empty() {
        return Err(CliError::Data(format!("the {name} dataset is empty")));
    }
    let outputs = model.predict(&dataset.full_batch().features)?;
    let fused: Vec<_> = outputs.iter().map(|o| o.fused.clone()).collect();
    let reports: Vec<_> = outputs.into_iter().map(|o| o.credibility).collect();
    let classification = classification_metrics(&fused, &dataset.labels())?;
    let rmis = rmis(&reports, dataset)?;
    let m_count = dataset.num_modalities();
    let mut mean_csic = vec![0.0; m_count];
    for r in &reports {
        for (acc, c) in mean_csic.iter_mut().zip(&r.csic) {
            *acc += c;
        }
    }
    mean_csic.iter_mut().for_each(|c| *c /= reports.len() as f64);
    Ok(Evaluation {
        dataset: name.to_string(),
        lambda_test,
        num_instances: dataset.len(),
        num_corrupted: dataset.num_corrupted(),
        metrics: Metrics {
            classification,
            rmis,
        },
        mean_csic,
    })
}

fn identity(cfg: &ResolvedConfig, model: &FusionModel, checkpoint_sha256: String) -> RunIdentity {
    RunIdentity {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        checkpoint_sha256,
        method: model.method().to_string(),
        regime: serde_json::to_value(cfg.train.regime)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default(),
    }
}

fn sidecar_line(command: Command, id: RunIdentity, cfg: &ResolvedConfig, evaluations: Vec<Evaluation>) -> String {
    let mut line = serde_json::to_string(&Sidecar {
        schema_version: SCHEMA_VERSION,
        command: command.name().to_string(),
        identity: id,
        config: cfg.clone(),
        evaluations,
    })
    .expect("sidecars serialize");
    line.push('\n');
    line
}

fn summary(evals: &[Evaluation]) -> String {
    let mut s = String::new();
    for e in evals {
        let label = e.lambda_test.map_or(e.dataset.clone(), |l| format!("lambda_test={l}"));
        let rmis = e
            .metrics
            .rmis
            .as_ref()
            .map_or("-".to_string(), |r| format!("{:.4}", r.overall));
        let _ = writeln!(
            s,
            "{label}: accuracy {:.4}, macro F1 {:.4}, RMIS {rmis}",
            e.metrics.classification.accuracy, e.metrics.classification.macro_f1
        );
    }
    s.trim_end().to_string()
}

fn eval_command(cfg: &ResolvedConfig) -> Result<Outcome, CliError> {
    let (model, sha) = load_checkpoint(cfg)?;
    let data = load_data(cfg)?;
    let s = &data.splits;
    let evals = [("train", &s.train), ("validation", &s.validation), ("test", &s.test)]
        .into_iter()
        .map(|(name, ds)| evaluate_dataset(&model, ds, name, None))
        .collect::<Result<Vec<_>, _>>()?;
    let id = identity(cfg, &model, sha);
    let mut staged = Staged::new();
    staged.append(cfg.out.join(METRICS_FILE), METRICS_HEADER, &metrics_rows(&id, &evals))?;
    let message = summary(&evals);
    staged.append(cfg.out.join(METRICS_SIDECAR), "", &sidecar_line(Command::Eval, id, cfg, evals))?;
    Ok(Outcome {
        written: staged.commit()?,
        message,
    })
}

fn sweep_command(cfg: &ResolvedConfig) -> Result<Outcome, CliError> {
    let (model, sha) = load_checkpoint(cfg)?;
    let data = load_data(cfg)?;
    // Grid points are evaluated concurrently; collecting preserves grid order.
    let evals = cfg
        .lambda_test
        .par_iter()
        .map(|&lambda| {
            let test = apply_conflict(&data.clean_test, &cfg.conflict, lambda, SplitStream::Test)?;
            evaluate_dataset(&model, &test, "test", Some(lambda))
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let id = identity(cfg, &model, sha);
    let mut staged = Staged::new();
    staged.append(cfg.out.join(RESULTS_FILE), RESULTS_HEADER, &results_rows(&id, &evals))?;
    staged.append(cfg.out.join(RMIS_FILE), RMIS_HEADER, &rmis_rows(&id, &evals))?;
    let message = summary(&evals);
    staged.append(cfg.out.join(RESULTS_SIDECAR), "", &sidecar_line(Command::Sweep, id, cfg, evals))?;
    Ok(Outcome {
        written: staged.commit()?,
        message,
    })
}

fn grad_check_command(cfg: &ResolvedConfig) -> Result<Outcome, CliError> {
    let model = if cfg.checkpoint.is_some() || cfg.out.join(CHECKPOINT_FILE).exists() {
        load_checkpoint(cfg)?.0
    } else {
        FusionModel::new(cfg.model_config(cfg.train.method))?
    };
    let data = load_data(cfg)?;
    let n = data.splits.train.len().min(GRAD_CHECK_BATCH);
    if n == 0 {
        return Err(CliError::Data("the training split is empty".into()));
    }
    let indices: Vec<usize> = (0..n).collect();
    let batch = data.splits.train.batch(&indices);
    let report = gradient_check(&model, &batch, cfg.train.mu, None, Some(GRAD_CHECK_SAMPLES), cfg.seed)?;
    let mut message = format!(
        "gradient check of {} on {n} instances (loss {:.6}):\n",
        model.method(),
        report.loss
    );
    let width = report.groups.iter().map(|g| g.name.len()).max().unwrap_or(0);
    for g in &report.groups {
        let _ = writeln!(
            message,
            "  {:<width$}  {:>5}/{:<5}  max relative error {:.3e}",
            g.name, g.checked, g.total, g.max_relative_error
        );
    }
    let _ = write!(message, "worst: {:.3e}", report.max_relative_error());
    if !report.max_relative_error().is_finite() {
        return Err(CliError::Numerical(message));
    }
    Ok(Outcome {
        written: Vec::new(),
        message,
    })
}
