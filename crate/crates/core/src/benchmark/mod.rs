//! Synthetic multimodal data, controlled cross-modal conflict, and the
//! evaluation metrics.

mod conflict;
pub mod format;
mod metrics;
mod synthetic;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::model::Batch;

pub use conflict::{apply_conflict, corrupt_splits, ConflictSpec, DonorPolicy, SplitStream};
pub use metrics::{classification_metrics, rmis, ClassificationMetrics, Metrics, RmisScores};
pub use synthetic::{generate_splits, generate_synthetic, SyntheticSpec};

#[derive(Debug, Error, PartialEq)]
pub enum BenchmarkError {
    #[error("invalid synthetic spec: {0}")]
    InvalidSynthetic(String),
    #[error("invalid conflict spec: {0}")]
    InvalidConflict(String),
    #[error("modality {modality}: no donor instance available for class {class}")]
    EmptyDonorPool { modality: usize, class: usize },
    #[error("metrics need at least one prediction")]
    EmptyInput,
    #[error("{what}: expected {expected}, got {got}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
}

/// Where an instance's features came from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    #[default]
    Clean,
    /// Modality `modality` was replaced by the features of an instance of
    /// `donor_class`; the label is still `source_class`.
    Corrupted {
        modality: usize,
        source_class: usize,
        donor_class: usize,
    },
}

impl Provenance {
    pub fn corrupted_modality(&self) -> Option<usize> {
        match self {
            Provenance::Clean => None,
            Provenance::Corrupted { modality, .. } => Some(*modality),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    /// One feature vector per modality.
    pub features: Vec<Vec<f64>>,
    pub label: usize,
    pub provenance: Provenance,
}

/// Labelled multimodal instances with corruption provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConflictDataset {
    pub num_classes: usize,
    pub dims: Vec<usize>,
    pub instances: Vec<Instance>,
}

impl ConflictDataset {
    pub fn new(num_classes: usize, dims: Vec<usize>) -> Self {
        Self {
            num_classes,
            dims,
            instances: Vec::new(),
        }
    }

    pub fn num_modalities(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.instances.iter().map(|i| i.label).collect()
    }

    /// Instances per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for i in &self.instances {
            counts[i.label] += 1;
        }
        counts
    }

    pub fn num_corrupted(&self) -> usize {
        self.instances
            .iter()
            .filter(|i| i.provenance != Provenance::Clean)
            .count()
    }

    /// Feature matrices and labels for the given instance indices.
    pub fn batch(&self, indices: &[usize]) -> Batch {
        let features = (0..self.num_modalities())
            .map(|m| {
                let d = self.dims[m];
                let mut data = Vec::with_capacity(indices.len() * d);
                for &i in indices {
                    data.extend_from_slice(&self.instances[i].features[m]);
                }
                Tensor::from_vec(indices.len(), d, data)
            })
            .collect();
        Batch {
            features,
            labels: indices.iter().map(|&i| self.instances[i].label).collect(),
        }
    }

    pub fn full_batch(&self) -> Batch {
        let all: Vec<usize> = (0..self.len()).collect();
        self.batch(&all)
    }
}

/// Train, validation and test data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplits {
    pub train: ConflictDataset,
    pub validation: ConflictDataset,
    pub test: ConflictDataset,
}
