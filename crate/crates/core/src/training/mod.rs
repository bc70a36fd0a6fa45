//! Training: the combined loss `L_total = L_f + mu * L_u`, end-to-end
//! (joint) and two-phase (decoupled) optimization, and gradient checking.

mod gradcheck;

use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Adam, AdamConfig, ParamId, Tape, Var};
use crate::benchmark::{ConflictDataset, DatasetSplits};
use crate::fusion::FusionMethod;
use crate::model::{Batch, ForwardOptions, ForwardPass, FusionModel, ModelConfig, ModelError};

pub use gradcheck::{
    gradient_check, GradCheckReport, GroupCheck, GRADIENT_CHECK_FLOOR, GRADIENT_CHECK_STEP,
};

/// Rows per chunk when evaluating losses over a whole split.
const EVAL_CHUNK: usize = 512;

#[derive(Debug, Error, PartialEq)]
pub enum TrainError {
    #[error("the {0} split is empty")]
    EmptySplit(&'static str),
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("label {label} at batch position {index} is out of range for {num_classes} classes")]
    InvalidLabel {
        index: usize,
        label: usize,
        num_classes: usize,
    },
    #[error("non-finite loss {loss} in {phase} phase, epoch {epoch}, step {step}")]
    NonFinite {
        phase: Phase,
        epoch: usize,
        step: usize,
        loss: f64,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// All parameters updated on `L_total` every step.
    Joint,
    /// Unimodal encoders and predictors first on `L_u`, then the frozen
    /// unimodal part feeds fusion training on `L_f`.
    #[default]
    Decoupled,
}

impl std::str::FromStr for Regime {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "joint" => Ok(Regime::Joint),
            "decoupled" => Ok(Regime::Decoupled),
            _ => Err(format!("unknown regime `{s}` (expected joint or decoupled)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Joint,
    Unimodal,
    Fusion,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::Joint => "joint",
            Phase::Unimodal => "unimodal",
            Phase::Fusion => "fusion",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub regime: Regime,
    pub method: FusionMethod,
    /// Weight of the unimodal loss in `L_total`.
    pub mu: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Epoch cap per phase.
    pub epochs: usize,
    /// Epochs without validation improvement before a phase stops.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            regime: Regime::Decoupled,
            method: FusionMethod::C2dpc,
            mu: 1.0,
            learning_rate: 1e-3,
            batch_size: 64,
            epochs: 100,
            patience: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn check(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.mu.is_finite() && self.mu >= 0.0) {
            return bad("mu must be finite and nonnegative");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        Ok(())
    }
}

/// Loss values: fusion `L_f`, unimodal `L_u`, and `L_f + mu * L_u`. The
/// fused terms are absent for training epochs of the unimodal phase, which
/// never runs the fusion layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub fusion: Option<f64>,
    pub unimodal: f64,
    pub total: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: Phase,
    /// Zero-based epoch within the phase.
    pub epoch: usize,
    /// Mean over training batches of the optimized objective's components.
    pub train: LossValues,
    pub validation: LossValues,
    /// Fused accuracy on the training batches; absent in the unimodal phase.
    pub train_accuracy: Option<f64>,
    pub validation_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub epochs: Vec<EpochRecord>,
    /// Per phase, the epoch whose parameters were kept (`None` when the
    /// initial parameters were kept).
    pub best_epochs: Vec<(Phase, Option<usize>)>,
    /// Wall-clock seconds; the only field that varies between identical runs.
    pub wall_clock_seconds: f64,
}

impl TrainReport {
    /// Joins per-phase reports run in regime order.
    pub fn from_phases(config: TrainConfig, phases: Vec<PhaseReport>, wall_clock_seconds: f64) -> Self {
        let best_epochs = phases.iter().map(|p| (p.phase, p.best_epoch)).collect();
        let epochs = phases.into_iter().flat_map(|p| p.epochs).collect();
        Self {
            config,
            epochs,
            best_epochs,
            wall_clock_seconds,
        }
    }

    /// The report without its timing, for reproducibility comparisons.
    pub fn without_timing(&self) -> TrainReport {
        TrainReport {
            wall_clock_seconds: 0.0,
            ..self.clone()
        }
    }
}

/// What a loss computation optimizes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Objective {
    Total { mu: f64 },
    Unimodal,
    Fusion,
}

/// Tape variables for the loss components. `fusion` is absent when fusion
/// was not recorded.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub objective: Var,
    pub fusion: Option<Var>,
    pub unimodal: Var,
}

fn check_labels(batch: &Batch, num_classes: usize) -> Result<(), TrainError> {
    for (index, &label) in batch.labels.iter().enumerate() {
        if label >= num_classes {
            return Err(TrainError::InvalidLabel {
                index,
                label,
                num_classes,
            });
        }
    }
    Ok(())
}

/// Records the forward pass and the loss for `objective`.
///
/// `L_f` is the mean cross-entropy of the fused prediction and `L_u` the mean
/// over the batch of the summed unimodal cross-entropies.
pub fn record_loss(
    tape: &mut Tape,
    model: &FusionModel,
    batch: &Batch,
    objective: Objective,
    opts: ForwardOptions,
) -> Result<(ForwardPass, LossVars), TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptySplit("batch"));
    }
    check_labels(batch, model.config().num_classes)?;
    let pass = model.forward(tape, &batch.features, opts)?;
    let labels: Arc<[usize]> = batch.labels.clone().into();
    let mut unimodal: Option<Var> = None;
    for &lp in &pass.unimodal_log_probs {
        let l = tape.nll(lp, Arc::clone(&labels));
        unimodal = Some(match unimodal {
            Some(acc) => tape.add(acc, l),
            None => l,
        });
    }
    let unimodal = unimodal.expect("models have at least one modality");
    let fusion = pass.fused_log_probs.map(|f| tape.nll(f, Arc::clone(&labels)));
    let objective = match objective {
        Objective::Unimodal => unimodal,
        Objective::Fusion => fusion.ok_or_else(|| {
            TrainError::InvalidConfig("the fusion objective needs the fusion forward pass".into())
        })?,
        Objective::Total { mu } => {
            let f = fusion.ok_or_else(|| {
                TrainError::InvalidConfig("the total objective needs the fusion forward pass".into())
            })?;
            let scaled = tape.scale(unimodal, mu);
            tape.add(f, scaled)
        }
    };
    Ok((
        pass,
        LossVars {
            objective,
            fusion,
            unimodal,
        },
    ))
}

/// `L_total = L_f + mu * L_u` with every parameter trainable.
pub fn loss_total(
    tape: &mut Tape,
    model: &FusionModel,
    batch: &Batch,
    mu: f64,
) -> Result<(ForwardPass, LossVars), TrainError> {
    record_loss(tape, model, batch, Objective::Total { mu }, ForwardOptions::joint())
}

fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Losses and fused accuracy over a whole dataset without gradients.
pub fn evaluate(model: &FusionModel, data: &ConflictDataset, mu: f64) -> Result<(LossValues, f64), TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptySplit("evaluation"));
    }
    let opts = ForwardOptions {
        train_unimodal: false,
        train_fusion: false,
        fusion: true,
        credibility: false,
    };
    let (mut f_sum, mut u_sum, mut correct) = (0.0, 0.0, 0usize);
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(EVAL_CHUNK) {
        let batch = data.batch(chunk);
        let mut tape = Tape::new();
        let (pass, vars) = record_loss(&mut tape, model, &batch, Objective::Unimodal, opts)?;
        let n = chunk.len() as f64;
        f_sum += tape.value(vars.fusion.expect("fusion recorded")).item() * n;
        u_sum += tape.value(vars.unimodal).item() * n;
        let fused = tape.value(pass.fused_log_probs.expect("fusion recorded"));
        correct += (0..fused.rows())
            .filter(|&i| argmax_row(fused.row(i)) == batch.labels[i])
            .count();
    }
    let n = data.len() as f64;
    let (fusion, unimodal) = (f_sum / n, u_sum / n);
    Ok((
        LossValues {
            fusion: Some(fusion),
            unimodal,
            total: Some(fusion + mu * unimodal),
        },
        correct as f64 / n,
    ))
}

fn monitored(phase: Phase, v: &LossValues) -> f64 {
    match phase {
        Phase::Joint => v.total.expect("evaluation computes every loss"),
        Phase::Unimodal => v.unimodal,
        Phase::Fusion => v.fusion.expect("evaluation computes every loss"),
    }
}

impl Phase {
    /// Random stream for the batch order of this phase.
    fn stream(self) -> u64 {
        match self {
            Phase::Joint | Phase::Unimodal => 0,
            Phase::Fusion => 1,
        }
    }

    fn objective(self, mu: f64) -> Objective {
        match self {
            Phase::Joint => Objective::Total { mu },
            Phase::Unimodal => Objective::Unimodal,
            Phase::Fusion => Objective::Fusion,
        }
    }

    fn options(self) -> ForwardOptions {
        match self {
            Phase::Joint => ForwardOptions::joint(),
            Phase::Unimodal => ForwardOptions::unimodal_only(),
            Phase::Fusion => ForwardOptions::fusion_only(),
        }
    }

    fn trainable(self, model: &FusionModel) -> Vec<ParamId> {
        match self {
            Phase::Joint => model.all_param_ids(),
            Phase::Unimodal => model.unimodal_param_ids(),
            Phase::Fusion => model.fusion_param_ids(),
        }
    }

    /// The phases of a regime, in order.
    pub fn sequence(regime: Regime) -> &'static [Phase] {
        match regime {
            Regime::Joint => &[Phase::Joint],
            Regime::Decoupled => &[Phase::Unimodal, Phase::Fusion],
        }
    }
}

/// Outcome of one optimization phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseReport {
    pub phase: Phase,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept; `None` keeps the starting ones.
    pub best_epoch: Option<usize>,
}

fn check_splits(splits: &DatasetSplits) -> Result<(), TrainError> {
    if splits.train.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if splits.validation.is_empty() {
        return Err(TrainError::EmptySplit("validation"));
    }
    Ok(())
}

/// Runs one phase with a fresh optimizer, early stopping on the phase's own
/// validation loss and restoring the best parameters at the end.
///
/// Running the phases of a regime one after the other gives exactly the
/// result of [`train_model`]. Decoupled training of several methods with the
/// same seed can therefore share one unimodal phase.
pub fn train_phase(
    model: &mut FusionModel,
    splits: &DatasetSplits,
    config: &TrainConfig,
    phase: Phase,
) -> Result<PhaseReport, TrainError> {
    config.check()?;
    check_splits(splits)?;
    let objective = phase.objective(config.mu);
    let opts = phase.options();
    let trainable = phase.trainable(model);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(phase.stream());
    let mut adam = Adam::new(AdamConfig {
        learning_rate: config.learning_rate,
        ..AdamConfig::default()
    });
    let (initial, _) = evaluate(model, &splits.validation, config.mu)?;
    let mut best_loss = monitored(phase, &initial);
    let mut best_store = model.store().clone();
    let mut best_epoch = None;
    let mut since_best = 0;
    let mut records = Vec::new();
    let mut order: Vec<usize> = (0..splits.train.len()).collect();

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut f_sum, mut u_sum, mut o_sum, mut correct) = (0.0, 0.0, 0.0, 0usize);
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch = splits.train.batch(chunk);
            let mut tape = Tape::new();
            let (pass, vars) = record_loss(&mut tape, model, &batch, objective, opts)?;
            let loss = tape.value(vars.objective).item();
            if !loss.is_finite() {
                return Err(TrainError::NonFinite {
                    phase,
                    epoch,
                    step,
                    loss,
                });
            }
            let n = chunk.len() as f64;
            o_sum += loss * n;
            u_sum += tape.value(vars.unimodal).item() * n;
            if let Some(f) = vars.fusion {
                f_sum += tape.value(f).item() * n;
            }
            if let Some(fused) = pass.fused_log_probs {
                let d = tape.value(fused);
                correct += (0..d.rows())
                    .filter(|&i| argmax_row(d.row(i)) == batch.labels[i])
                    .count();
            }
            tape.backward(vars.objective, model.store_mut())
                .expect("objective is a recorded scalar");
            adam.step(model.store_mut(), &trainable);
        }
        let n = splits.train.len() as f64;
        let fusion = opts.fusion.then_some(f_sum / n);
        let train_values = LossValues {
            fusion,
            unimodal: u_sum / n,
            total: match phase {
                Phase::Joint => Some(o_sum / n),
                _ => fusion.map(|f| f + config.mu * u_sum / n),
            },
        };
        let (validation, validation_accuracy) = evaluate(model, &splits.validation, config.mu)?;
        records.push(EpochRecord {
            phase,
            epoch,
            train: train_values,
            validation,
            train_accuracy: opts.fusion.then_some(correct as f64 / n),
            validation_accuracy,
        });
        let v = monitored(phase, &validation);
        if !v.is_finite() {
            return Err(TrainError::NonFinite {
                phase,
                epoch,
                step: order.len().div_ceil(config.batch_size),
                loss: v,
            });
        }
        if v < best_loss {
            best_loss = v;
            best_store = model.store().clone();
            best_epoch = Some(epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    *model.store_mut() = best_store;
    Ok(PhaseReport {
        phase,
        epochs: records,
        best_epoch,
    })
}

/// Trains a fresh model built from `model_config` (its method is replaced by
/// the one in `config`).
pub fn train(
    splits: &DatasetSplits,
    model_config: &ModelConfig,
    config: &TrainConfig,
) -> Result<(FusionModel, TrainReport), TrainError> {
    let mut mc = model_config.clone();
    mc.method = config.method;
    let model = FusionModel::new(mc)?;
    train_model(model, splits, config)
}

/// Trains `model` with every phase of the configured regime.
pub fn train_model(
    mut model: FusionModel,
    splits: &DatasetSplits,
    config: &TrainConfig,
) -> Result<(FusionModel, TrainReport), TrainError> {
    config.check()?;
    check_splits(splits)?;
    if model.method() != config.method {
        return Err(TrainError::InvalidConfig(format!(
            "model was built for {} but the config trains {}",
            model.method(),
            config.method
        )));
    }
    let started = Instant::now();
    let mut phases = Vec::new();
    for &phase in Phase::sequence(config.regime) {
        phases.push(train_phase(&mut model, splits, config, phase)?);
    }
    let report = TrainReport::from_phases(config.clone(), phases, started.elapsed().as_secs_f64());
    Ok((model, report))
}
