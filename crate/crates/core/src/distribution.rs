use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance on the total mass of a [`PredictiveDistribution`].
pub const SIMPLEX_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum DistributionError {
    #[error("probability vector is empty")]
    Empty,
    #[error("entry {index} is {value}, expected a finite nonnegative number")]
    InvalidEntry { index: usize, value: f64 },
    #[error("probabilities sum to {0}, expected 1")]
    NotNormalized(f64),
}

/// A probability vector over the `K` target classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct PredictiveDistribution {
    probs: Vec<f64>,
}

impl PredictiveDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self, DistributionError> {
        if probs.is_empty() {
            return Err(DistributionError::Empty);
        }
        if let Some((index, &value)) = probs
            .iter()
            .enumerate()
            .find(|(_, p)| !p.is_finite() || **p < 0.0)
        {
            return Err(DistributionError::InvalidEntry { index, value });
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > SIMPLEX_TOLERANCE {
            return Err(DistributionError::NotNormalized(total));
        }
        Ok(Self { probs })
    }

    /// Normalizes log-scores with a numerically stable softmax.
    pub fn from_log_scores(scores: &[f64]) -> Result<Self, DistributionError> {
        if scores.is_empty() {
            return Err(DistributionError::Empty);
        }
        Self::new(crate::autodiff::softmax(scores))
    }

    pub fn uniform(k: usize) -> Self {
        assert!(k > 0, "uniform distribution over zero classes");
        Self {
            probs: vec![1.0 / k as f64; k],
        }
    }

    pub fn one_hot(k: usize, class: usize) -> Self {
        assert!(class < k, "class {class} out of range for {k} classes");
        let mut probs = vec![0.0; k];
        probs[class] = 1.0;
        Self { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn num_classes(&self) -> usize {
        self.probs.len()
    }

    /// Index of the largest probability; the lowest index wins ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }
}

impl TryFrom<Vec<f64>> for PredictiveDistribution {
    type Error = DistributionError;

    fn try_from(v: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<PredictiveDistribution> for Vec<f64> {
    fn from(p: PredictiveDistribution) -> Self {
        p.probs
    }
}

impl AsRef<[f64]> for PredictiveDistribution {
    fn as_ref(&self) -> &[f64] {
        &self.probs
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_invalid_vectors() {
        assert_eq!(PredictiveDistribution::new(vec![]), Err(DistributionError::Empty));
        assert!(matches!(
            PredictiveDistribution::new(vec![0.5, -0.1, 0.6]),
            Err(DistributionError::InvalidEntry { index: 1, .. })
        ));
        assert!(matches!(
            PredictiveDistribution::new(vec![0.5, 0.6]),
            Err(DistributionError::NotNormalized(_))
        ));
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        let p = PredictiveDistribution::new(vec![0.25, 0.375, 0.375]).unwrap();
        assert_eq!(p.argmax(), 1);
    }
}
