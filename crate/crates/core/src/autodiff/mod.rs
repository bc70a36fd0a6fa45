//! Minimal reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records a forward computation built from a small, closed set of
//! primitives (elementwise arithmetic, `exp`/`log`, clamping, matrix products,
//! row-wise (log-)softmax, reductions, column slicing and a mean negative
//! log-likelihood) plus [`CustomOp`] kernels with hand-written adjoints.
//! [`Tape::backward`] walks the tape in reverse and accumulates parameter
//! gradients into a [`ParamStore`], which [`Adam`] then consumes.
//!
//! Tapes are single-owner; data parallelism uses one tape per shard.

mod adam;
mod params;
mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use params::{ParamId, ParamStore, Parameter};
pub use tape::{CustomOp, Gradients, OpCache, Tape, Var};
pub use tensor::{log_softmax_in_place, log_sum_exp, softmax, Tensor};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AutodiffError {
    #[error("loss must be a 1x1 scalar, got shape {0:?}")]
    NonScalarLoss((usize, usize)),
    #[error("variable {0} was never recorded on this tape")]
    UnknownVar(usize),
}
