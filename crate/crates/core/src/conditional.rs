//! Sum-node weights for the circuit: static learnable logits, or a
//! hypernetwork `Theta = g(z)` that makes the circuit conditional on the
//! joint context.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{log_softmax_in_place, ParamId, ParamStore, Tape, Tensor, Var};
use crate::circuit::{Circuit, CircuitError, WeightAssignment};
use crate::model::{param_seed, Mlp, MlpSpec, ModelError};

#[derive(Debug, Error, PartialEq)]
pub enum ConditionalError {
    #[error("weight layout does not match the circuit: {0}")]
    LayoutMismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Circuit(#[from] CircuitError),
}

/// Hypernetwork shape: an MLP whose flat output is split into one logit row
/// per `(weight_slot, arity)` entry of `output_layout`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HypernetSpec {
    pub mlp: MlpSpec,
    pub output_layout: Vec<(usize, usize)>,
}

fn check_layout(layout: &[(usize, usize)], circuit: &Circuit) -> Result<Arc<[usize]>, ConditionalError> {
    let expected = circuit.weight_layout()?;
    if layout != expected.as_slice() {
        return Err(ConditionalError::LayoutMismatch(format!(
            "layout lists {} slots, circuit has {}; every slot must appear once in order with its arity",
            layout.len(),
            expected.len()
        )));
    }
    Ok(layout.iter().map(|&(_, a)| a).collect())
}

/// Row-wise log-softmax of a flat logit row split into segments.
pub fn segment_log_softmax(logits: &[f64], arities: &[usize]) -> Vec<f64> {
    let mut out = logits.to_vec();
    let mut start = 0;
    for &a in arities {
        log_softmax_in_place(&mut out[start..start + a]);
        start += a;
    }
    out
}

fn assignment_from_logits(logits: &[f64], arities: &[usize]) -> WeightAssignment {
    let lw = segment_log_softmax(logits, arities);
    let flat: Vec<f64> = lw.iter().map(|x| x.exp()).collect();
    WeightAssignment::from_flat(&flat, arities).expect("softmax rows are normalized")
}

/// Softmax of per-slot logit rows.
pub fn static_weights(logits: &[Vec<f64>], arities: &[usize]) -> Result<WeightAssignment, ConditionalError> {
    if logits.len() != arities.len() {
        return Err(ConditionalError::LayoutMismatch(format!(
            "{} logit rows for {} slots",
            logits.len(),
            arities.len()
        )));
    }
    for (slot, (row, &a)) in logits.iter().zip(arities).enumerate() {
        if row.len() != a {
            return Err(CircuitError::WeightArity {
                slot,
                expected: a,
                got: row.len(),
            }
            .into());
        }
    }
    Ok(WeightAssignment::from_logits(logits))
}

/// Context-free sum weights held as one flat `1 x W` logit parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct StaticWeights {
    logits: ParamId,
    arities: Arc<[usize]>,
}

impl StaticWeights {
    /// Registers standard-normal initial logits. Non-uniform starting weights
    /// break the symmetry between target leaves that all start uniform.
    pub fn register(
        store: &mut ParamStore,
        name: &str,
        circuit: &Circuit,
        seed: u64,
    ) -> Result<Self, ConditionalError> {
        let arities: Arc<[usize]> = circuit.slot_arities()?.into();
        let width: usize = arities.iter().sum();
        let mut rng = ChaCha8Rng::seed_from_u64(param_seed(seed, name));
        let values = (0..width).map(|_| StandardNormal.sample(&mut rng)).collect();
        let logits = store.add(name, Tensor::from_vec(1, width, values));
        Ok(Self { logits, arities })
    }

    pub fn bind(store: &ParamStore, name: &str, circuit: &Circuit) -> Result<Self, ConditionalError> {
        let arities: Arc<[usize]> = circuit.slot_arities()?.into();
        let width: usize = arities.iter().sum();
        let logits = store
            .find(name)
            .ok_or_else(|| ModelError::InvalidConfig(format!("missing parameter {name}")))?;
        if store.value(logits).shape() != (1, width) {
            return Err(ConditionalError::LayoutMismatch(format!(
                "parameter {name} has shape {:?}, expected (1, {width})",
                store.value(logits).shape()
            )));
        }
        Ok(Self { logits, arities })
    }

    pub fn param_id(&self) -> ParamId {
        self.logits
    }

    /// `1 x W` log-weights on the tape.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, trainable: bool) -> Var {
        let l = if trainable {
            tape.param(store, self.logits)
        } else {
            tape.constant(store.value(self.logits).clone())
        };
        tape.log_softmax_segments(l, Arc::clone(&self.arities))
    }

    pub fn weights(&self, store: &ParamStore) -> WeightAssignment {
        assignment_from_logits(store.value(self.logits).data(), &self.arities)
    }
}

/// The hypernetwork `g`: an MLP trunk with a linear head emitting every sum
/// node's logits, normalized per slot with softmax at temperature 1.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypernet {
    mlp: Mlp,
    layout: Vec<(usize, usize)>,
    arities: Arc<[usize]>,
}

impl Hypernet {
    /// `hidden` lists the trunk widths; the head width is implied by the
    /// circuit's weight layout.
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        context_dim: usize,
        hidden: &[usize],
        activation: crate::model::Activation,
        circuit: &Circuit,
        seed: u64,
    ) -> Result<Self, ConditionalError> {
        let layout = circuit.weight_layout()?;
        let arities = check_layout(&layout, circuit)?;
        let mut widths = hidden.to_vec();
        widths.push(arities.iter().sum());
        let mlp = Mlp::register(store, prefix, MlpSpec::new(context_dim, widths, activation), seed)?;
        Ok(Self { mlp, layout, arities })
    }

    pub fn bind(store: &ParamStore, prefix: &str, spec: &HypernetSpec, circuit: &Circuit) -> Result<Self, ConditionalError> {
        let arities = check_layout(&spec.output_layout, circuit)?;
        if spec.mlp.output_dim() != arities.iter().sum::<usize>() {
            return Err(ConditionalError::LayoutMismatch(format!(
                "hypernetwork emits {} values, layout needs {}",
                spec.mlp.output_dim(),
                arities.iter().sum::<usize>()
            )));
        }
        let mlp = Mlp::bind(store, prefix, spec.mlp.clone())?;
        Ok(Self {
            mlp,
            layout: spec.output_layout.clone(),
            arities,
        })
    }

    pub fn spec(&self) -> HypernetSpec {
        HypernetSpec {
            mlp: self.mlp.spec().clone(),
            output_layout: self.layout.clone(),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.mlp.param_ids()
    }

    /// Zeroes the trunk's input weights, making the output independent of `z`.
    pub fn zero_input_weights(&self, store: &mut ParamStore) {
        store.value_mut(self.mlp.input_weight()).fill(0.0);
    }

    /// `B x W` per-instance log-weights.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, z: Var, trainable: bool) -> Var {
        let logits = self.mlp.forward(tape, store, z, trainable);
        tape.log_softmax_segments(logits, Arc::clone(&self.arities))
    }

    /// `Theta = g(z)` for one context vector.
    pub fn weights(&self, store: &ParamStore, z: &[f64]) -> Result<WeightAssignment, ConditionalError> {
        let logits = self.mlp.apply(store, z)?;
        Ok(assignment_from_logits(&logits, &self.arities))
    }

    /// Flat logits before normalization.
    pub fn logits(&self, store: &ParamStore, z: &[f64]) -> Result<Vec<f64>, ConditionalError> {
        Ok(self.mlp.apply(store, z)?)
    }
}
