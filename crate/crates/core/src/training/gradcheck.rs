use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{loss_total, TrainError};
use crate::autodiff::{ParamId, Tape};
use crate::model::{Batch, FusionModel};

/// Central-difference step.
pub const GRADIENT_CHECK_STEP: f64 = 1e-5;

/// Denominator floor in the relative error `|a - n| / max(|a|, |n|, floor)`.
/// Rounding in the loss limits central differences at the default step to
/// about 1e-10 absolute accuracy, so gradients below the floor are in effect
/// compared absolutely.
pub const GRADIENT_CHECK_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupCheck {
    pub name: String,
    pub checked: usize,
    pub total: usize,
    pub max_relative_error: f64,
    /// Flat index of the worst entry with its analytic and numeric values.
    pub worst: Option<(usize, f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub loss: f64,
    pub groups: Vec<GroupCheck>,
}

impl GradCheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.groups
            .iter()
            .map(|g| g.max_relative_error)
            .fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.groups.iter().map(|g| g.checked).sum()
    }
}

fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(GRADIENT_CHECK_FLOOR)
}

fn total_loss(model: &FusionModel, batch: &Batch, mu: f64) -> Result<f64, TrainError> {
    let mut tape = Tape::new();
    let (_, vars) = loss_total(&mut tape, model, batch, mu)?;
    Ok(tape.value(vars.objective).item())
}

/// Compares reverse-mode gradients of `L_total` with central differences.
///
/// Every parameter in `params` (all of them when `None`) is one group. Up to
/// `max_per_group` entries of each group are drawn without replacement using
/// `seed`; `None` checks every entry.
pub fn gradient_check(
    model: &FusionModel,
    batch: &Batch,
    mu: f64,
    params: Option<&[ParamId]>,
    max_per_group: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport, TrainError> {
    let ids: Vec<ParamId> = match params {
        Some(p) => p.to_vec(),
        None => model.all_param_ids(),
    };
    let mut work = model.clone();
    work.store_mut().zero_grads();
    let mut tape = Tape::new();
    let (_, vars) = loss_total(&mut tape, &work, batch, mu)?;
    let loss = tape.value(vars.objective).item();
    if !loss.is_finite() {
        return Err(TrainError::NonFinite {
            phase: super::Phase::Joint,
            epoch: 0,
            step: 0,
            loss,
        });
    }
    tape.backward(vars.objective, work.store_mut())
        .expect("objective is a recorded scalar");
    let grads: Vec<_> = ids.iter().map(|&id| work.store().grad(id)).collect();
    work.store_mut().zero_grads();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut groups = Vec::with_capacity(ids.len());
    for (&id, grad) in ids.iter().zip(&grads) {
        let total = grad.len();
        let mut entries: Vec<usize> = match max_per_group {
            Some(k) if k < total => sample(&mut rng, total, k).into_vec(),
            _ => (0..total).collect(),
        };
        entries.sort_unstable();
        let mut worst: Option<(usize, f64, f64)> = None;
        let mut max_err = 0.0;
        for &i in &entries {
            let original = work.store().value(id).data()[i];
            work.store_mut().value_mut(id).data_mut()[i] = original + GRADIENT_CHECK_STEP;
            let up = total_loss(&work, batch, mu)?;
            work.store_mut().value_mut(id).data_mut()[i] = original - GRADIENT_CHECK_STEP;
            let down = total_loss(&work, batch, mu)?;
            work.store_mut().value_mut(id).data_mut()[i] = original;
            let numeric = (up - down) / (2.0 * GRADIENT_CHECK_STEP);
            let analytic = grad.data()[i];
            let err = relative_error(analytic, numeric);
            if worst.is_none() || err > max_err {
                max_err = err;
                worst = Some((i, analytic, numeric));
            }
        }
        groups.push(GroupCheck {
            name: work.store().name(id).to_string(),
            checked: entries.len(),
            total,
            max_relative_error: max_err,
            worst,
        });
    }
    Ok(GradCheckReport { loss, groups })
}
