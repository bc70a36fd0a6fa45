//! Credibility-aware multimodal late fusion with probabilistic circuits.
//!
//! Each modality has its own encoder and classifier. Their predictive
//! distributions become the evidence of a probabilistic circuit over the
//! modalities and the target, whose sum weights are either static or
//! produced per instance by a hypernetwork. Marginalizing one modality at a
//! time yields a per-modality credibility score (the KL divergence between
//! the full and the reduced posterior).

pub mod autodiff;
pub mod benchmark;
pub mod circuit;
pub mod conditional;
pub mod distribution;
pub mod fusion;
pub mod io;
pub mod model;
pub mod training;

pub use autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
pub use benchmark::{
    ConflictDataset, ConflictSpec, DatasetSplits, DonorPolicy, Instance, Metrics, Provenance,
    SyntheticSpec,
};
pub use circuit::{Circuit, CircuitError, MarginalMask, StructureConfig};
pub use distribution::PredictiveDistribution;
pub use fusion::{CredibilityReport, FusionMethod};
pub use model::{Batch, FusionModel, ModelConfig, ModelError};
pub use training::{Regime, TrainConfig, TrainError, TrainReport};
