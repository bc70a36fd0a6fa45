//! Model checkpoints: the configuration, the circuit document and every
//! named parameter tensor in one JSON file.
//!
//! ```json
//! { "format": "c2mf-checkpoint", "version": 1,
//!   "config": { ... }, "circuit": { ... },
//!   "params": [ { "name": "encoder.0.layer0.weight",
//!                 "value": { "rows": 8, "cols": 32, "data": [ ... ] } }, ... ] }
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{FusionModel, ModelConfig, ModelError};
use crate::autodiff::{ParamStore, Parameter};
use crate::circuit::{validate, Circuit};

pub const CHECKPOINT_FORMAT: &str = "c2mf-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("malformed checkpoint: {0}")]
    Json(#[from] serde_json::Error),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("unknown document format `{0}`")]
    UnknownFormat(String),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint circuit is invalid: {0}")]
    InvalidCircuit(String),
    #[error("checkpoint does not match its configuration: {0}")]
    Model(#[from] ModelError),
}

#[derive(Serialize, Deserialize)]
struct Document<C, P> {
    format: String,
    version: u32,
    config: ModelConfig,
    circuit: C,
    params: P,
}

impl FusionModel {
    pub fn to_checkpoint_json(&self) -> String {
        let params: Vec<&Parameter> = self.store().iter().map(|(_, p)| p).collect();
        serde_json::to_string_pretty(&Document {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config: self.config().clone(),
            circuit: &self.circuit(),
            params,
        })
        .expect("checkpoint serialization cannot fail")
    }

    pub fn from_checkpoint_json(text: &str) -> Result<Self, CheckpointError> {
        let doc: Document<Circuit, Vec<Parameter>> = serde_json::from_str(text)?;
        if doc.format != CHECKPOINT_FORMAT {
            return Err(CheckpointError::UnknownFormat(doc.format));
        }
        if doc.version != CHECKPOINT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(doc.version));
        }
        let report = validate(&doc.circuit);
        if !report.is_ok() {
            return Err(CheckpointError::InvalidCircuit(report.to_string()));
        }
        let mut store = ParamStore::new();
        for p in doc.params {
            if store.find(&p.name).is_some() {
                return Err(ModelError::InvalidConfig(format!("duplicate parameter {}", p.name)).into());
            }
            store.add(p.name, p.value);
        }
        Ok(FusionModel::from_parts(doc.config, store, doc.circuit)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_checkpoint_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        Self::from_checkpoint_json(&std::fs::read_to_string(path)?)
    }
}
