//! Library side of the `c2mf` command-line tool: configuration, the five
//! commands and the result tables they write.

pub mod commands;
pub mod config;
pub mod output;
pub mod results;

use c2mf::benchmark::format::DatasetFormatError;
use c2mf::benchmark::BenchmarkError;
use c2mf::model::CheckpointError;
use c2mf::training::TrainError;
use c2mf::ModelError;
use thiserror::Error;

pub use commands::{run, Command, Outcome};
pub use config::{Overrides, ResolvedConfig, RunConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        source: std::io::Error,
    },
}

impl CliError {
    /// Process exit status: 1 for usage errors, 2 for data errors and 3 for
    /// numerical failures.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) | CliError::Io { .. } => 2,
            CliError::Numerical(_) => 3,
        }
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        CliError::Io {
            context: context.into(),
            source,
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => CliError::Numerical(e.to_string()),
            TrainError::InvalidConfig(_) => CliError::Usage(e.to_string()),
            TrainError::Model(m) => m.into(),
            TrainError::EmptySplit(_) | TrainError::InvalidLabel { .. } => CliError::Data(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::InvalidConfig(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<BenchmarkError> for CliError {
    fn from(e: BenchmarkError) -> Self {
        match e {
            BenchmarkError::InvalidSynthetic(_) | BenchmarkError::InvalidConflict(_) => {
                CliError::Usage(e.to_string())
            }
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<DatasetFormatError> for CliError {
    fn from(e: DatasetFormatError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Data(e.to_string())
    }
}
