//! Fusion strategies and credibility.
//!
//! The circuit-based methods read the fused prediction off the conditional
//! `P(Y | p_1..p_M)`; the weighted-mean methods average the unimodal
//! predictions with each modality's relative credibility. Credibility of
//! modality `m` is the KL divergence from the full posterior to the posterior
//! with `m` marginalized out.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::circuit::{Circuit, CircuitError, MarginalMask, WeightAssignment};
use crate::distribution::PredictiveDistribution;
use crate::model::to_leaf_inputs;

/// Floor applied to both arguments of [`kl_divergence`] before taking logs.
pub const KL_EPSILON: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum FusionError {
    #[error("expected {expected} entries, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("fusion needs at least one modality")]
    NoModalities,
    #[error(transparent)]
    Circuit(#[from] CircuitError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMethod {
    /// Circuit posterior with static weights.
    Dpc,
    /// Circuit posterior with hypernetwork weights.
    C2dpc,
    /// Credibility-weighted mean with static weights.
    Cwm,
    /// Credibility-weighted mean with hypernetwork weights.
    C2wm,
}

impl FusionMethod {
    pub const ALL: [FusionMethod; 4] = [
        FusionMethod::Dpc,
        FusionMethod::C2dpc,
        FusionMethod::Cwm,
        FusionMethod::C2wm,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FusionMethod::Dpc => "dpc",
            FusionMethod::C2dpc => "c2dpc",
            FusionMethod::Cwm => "cwm",
            FusionMethod::C2wm => "c2wm",
        }
    }

    /// Whether sum weights come from the context hypernetwork.
    pub fn is_conditional(self) -> bool {
        matches!(self, FusionMethod::C2dpc | FusionMethod::C2wm)
    }

    /// Whether the fused prediction is the credibility-weighted mean.
    pub fn is_weighted_mean(self) -> bool {
        matches!(self, FusionMethod::Cwm | FusionMethod::C2wm)
    }
}

impl fmt::Display for FusionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        FusionMethod::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown fusion method `{s}` (expected dpc, c2dpc, cwm or c2wm)"))
    }
}

/// Per-instance credibility of every modality.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CredibilityReport {
    pub csic: Vec<f64>,
    pub relative_csic: Vec<f64>,
    pub marginal_posteriors: Vec<PredictiveDistribution>,
    pub full_posterior: PredictiveDistribution,
}

/// `KL(p || q)` with both arguments floored at [`KL_EPSILON`]; tiny negative
/// results from the flooring are reported as 0.
pub fn kl_divergence(p: &PredictiveDistribution, q: &PredictiveDistribution) -> Result<f64, FusionError> {
    if p.num_classes() != q.num_classes() {
        return Err(FusionError::LengthMismatch {
            expected: p.num_classes(),
            got: q.num_classes(),
        });
    }
    Ok(kl_raw(p.probs(), q.probs()))
}

pub(crate) fn kl_raw(p: &[f64], q: &[f64]) -> f64 {
    let kl: f64 = p
        .iter()
        .zip(q)
        .map(|(&a, &b)| a * (a.max(KL_EPSILON).ln() - b.max(KL_EPSILON).ln()))
        .sum();
    kl.max(0.0)
}

/// Normalizes credibilities to sum to one; an all-zero vector maps to the
/// uniform vector `1/M`.
pub fn relative_credibility(csic: &[f64]) -> Vec<f64> {
    let total: f64 = csic.iter().sum();
    if total > 0.0 {
        csic.iter().map(|c| c / total).collect()
    } else {
        vec![1.0 / csic.len() as f64; csic.len()]
    }
}

fn leaf_features(preds: &[PredictiveDistribution]) -> Result<Vec<Vec<f64>>, FusionError> {
    if preds.is_empty() {
        return Err(FusionError::NoModalities);
    }
    Ok(preds.iter().map(to_leaf_inputs).collect())
}

/// `P(Y | p_1..p_M)` from the circuit, with the unimodal predictions mapped
/// to leaf inputs.
pub fn fuse_posterior(
    circuit: &Circuit,
    weights: &WeightAssignment,
    preds: &[PredictiveDistribution],
) -> Result<PredictiveDistribution, FusionError> {
    let features = leaf_features(preds)?;
    Ok(circuit.posterior_over_target(weights, &features, &MarginalMask::none())?)
}

/// Full posterior, one marginal posterior per modality, and the resulting
/// credibilities.
pub fn compute_csic(
    circuit: &Circuit,
    weights: &WeightAssignment,
    preds: &[PredictiveDistribution],
) -> Result<CredibilityReport, FusionError> {
    let features = leaf_features(preds)?;
    let full = circuit.posterior_over_target(weights, &features, &MarginalMask::none())?;
    let mut marginals = Vec::with_capacity(preds.len());
    let mut csic = Vec::with_capacity(preds.len());
    for m in 0..preds.len() {
        let marg = circuit.posterior_over_target(weights, &features, &MarginalMask::modality(m))?;
        csic.push(kl_raw(full.probs(), marg.probs()));
        marginals.push(marg);
    }
    Ok(CredibilityReport {
        relative_csic: relative_credibility(&csic),
        csic,
        marginal_posteriors: marginals,
        full_posterior: full,
    })
}

/// `sum_m relative_csic_m * p_m`.
pub fn fuse_weighted_mean(
    report: &CredibilityReport,
    preds: &[PredictiveDistribution],
) -> Result<PredictiveDistribution, FusionError> {
    if preds.is_empty() {
        return Err(FusionError::NoModalities);
    }
    if report.relative_csic.len() != preds.len() {
        return Err(FusionError::LengthMismatch {
            expected: report.relative_csic.len(),
            got: preds.len(),
        });
    }
    let k = preds[0].num_classes();
    let mut out = vec![0.0; k];
    for (p, &w) in preds.iter().zip(&report.relative_csic) {
        if p.num_classes() != k {
            return Err(FusionError::LengthMismatch {
                expected: k,
                got: p.num_classes(),
            });
        }
        for (o, &x) in out.iter_mut().zip(p.probs()) {
            *o += w * x;
        }
    }
    Ok(PredictiveDistribution::new(out).expect("convex combination of distributions"))
}
