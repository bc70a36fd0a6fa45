//! Unimodal encoders and predictors, the joint context aggregator and the
//! bridge from predictive distributions to circuit leaf inputs, plus the
//! assembled fusion network built from them.

mod checkpoint;
mod network;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{softmax, ParamId, ParamStore, Tape, Tensor, Var};
use crate::circuit::CircuitError;
use crate::distribution::PredictiveDistribution;

pub use checkpoint::{CheckpointError, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use network::{
    Batch, ForwardOptions, ForwardPass, FusionModel, InstanceOutput, ModelConfig,
};

/// Lower clamp applied to probabilities before taking logs for leaf inputs.
pub const LEAF_EPSILON: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("{what}: expected dimension {expected}, got {got}")]
    Dimension {
        what: String,
        expected: usize,
        got: usize,
    },
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Circuit(#[from] CircuitError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }
}

/// Fully connected network: `widths` are the output widths of successive
/// layers. The activation follows every layer except the last, which is
/// linear.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub widths: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(input_dim: usize, widths: Vec<usize>, activation: Activation) -> Self {
        Self {
            input_dim,
            widths,
            activation,
        }
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap_or(&self.input_dim)
    }

    pub fn check(&self) -> Result<(), ModelError> {
        if self.widths.is_empty() {
            return Err(ModelError::InvalidConfig("an MLP needs at least one layer".into()));
        }
        if self.input_dim == 0 || self.widths.contains(&0) {
            return Err(ModelError::InvalidConfig("MLP widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Layer {
    weight: ParamId,
    bias: ParamId,
}

/// An MLP whose weights live in a [`ParamStore`].
///
/// Weights are stored `in x out` so a batch `B x in` maps to `B x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    spec: MlpSpec,
    layers: Vec<Layer>,
}

/// Deterministic per-parameter seed: the same `(seed, name)` always yields the
/// same initial values, independent of registration order.
pub(crate) fn param_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a over the name, then mixed with the model seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

pub(crate) fn uniform_init(seed: u64, name: &str, rows: usize, cols: usize, bound: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(param_seed(seed, name));
    Tensor::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect(),
    )
}

pub(crate) fn normal_init(seed: u64, name: &str, rows: usize, cols: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(param_seed(seed, name));
    Tensor::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
    )
}

impl Mlp {
    /// Registers the layers under `prefix` with the usual
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` initialization.
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        spec: MlpSpec,
        seed: u64,
    ) -> Result<Self, ModelError> {
        spec.check()?;
        let mut layers = Vec::with_capacity(spec.widths.len());
        let mut fan_in = spec.input_dim;
        for (l, &out) in spec.widths.iter().enumerate() {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let wname = format!("{prefix}.layer{l}.weight");
            let bname = format!("{prefix}.layer{l}.bias");
            let w = uniform_init(seed, &wname, fan_in, out, bound);
            let b = uniform_init(seed, &bname, 1, out, bound);
            layers.push(Layer {
                weight: store.add(wname, w),
                bias: store.add(bname, b),
            });
            fan_in = out;
        }
        Ok(Self { spec, layers })
    }

    /// Re-binds an MLP to parameters already present in `store`.
    pub fn bind(store: &ParamStore, prefix: &str, spec: MlpSpec) -> Result<Self, ModelError> {
        spec.check()?;
        let mut layers = Vec::with_capacity(spec.widths.len());
        let mut fan_in = spec.input_dim;
        for (l, &out) in spec.widths.iter().enumerate() {
            let find = |suffix: &str, shape: (usize, usize)| {
                let name = format!("{prefix}.layer{l}.{suffix}");
                let id = store
                    .find(&name)
                    .ok_or_else(|| ModelError::InvalidConfig(format!("missing parameter {name}")))?;
                if store.value(id).shape() != shape {
                    return Err(ModelError::InvalidConfig(format!(
                        "parameter {name} has shape {:?}, expected {shape:?}",
                        store.value(id).shape()
                    )));
                }
                Ok(id)
            };
            layers.push(Layer {
                weight: find("weight", (fan_in, out))?,
                bias: find("bias", (1, out))?,
            });
            fan_in = out;
        }
        Ok(Self { spec, layers })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| [l.weight, l.bias]).collect()
    }

    /// Weight matrix of the first layer, the only one that sees the input.
    pub fn input_weight(&self) -> ParamId {
        self.layers[0].weight
    }

    /// Records the forward pass. With `trainable == false` the weights enter
    /// the tape as constants and receive no gradient.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, trainable: bool) -> Var {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let (w, b) = if trainable {
                (tape.param(store, layer.weight), tape.param(store, layer.bias))
            } else {
                (
                    tape.constant(store.value(layer.weight).clone()),
                    tape.constant(store.value(layer.bias).clone()),
                )
            };
            let z = tape.matmul(h, w);
            h = tape.add_row(z, b);
            if l < last {
                h = match self.spec.activation {
                    Activation::Relu => tape.relu(h),
                    Activation::Tanh => tape.tanh(h),
                };
            }
        }
        h
    }

    /// Forward pass on a single input vector without a tape.
    pub fn apply(&self, store: &ParamStore, x: &[f64]) -> Result<Vec<f64>, ModelError> {
        if x.len() != self.spec.input_dim {
            return Err(ModelError::Dimension {
                what: "MLP input".into(),
                expected: self.spec.input_dim,
                got: x.len(),
            });
        }
        let mut h = Tensor::row_vector(x.to_vec());
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            h = h.matmul(store.value(layer.weight));
            h.add_assign(store.value(layer.bias));
            if l < last {
                h = h.map(|v| self.spec.activation.apply(v));
            }
        }
        Ok(h.into_vec())
    }
}

/// `h_m = E_m(x_m)`.
pub fn encode(encoder: &Mlp, store: &ParamStore, x: &[f64]) -> Result<Vec<f64>, ModelError> {
    encoder.apply(store, x)
}

/// `p_m = softmax(f_m(h_m))` for a linear predictor head.
pub fn predict_unimodal(
    predictor: &Mlp,
    store: &ParamStore,
    h: &[f64],
) -> Result<PredictiveDistribution, ModelError> {
    let logits = predictor.apply(store, h)?;
    Ok(PredictiveDistribution::new(softmax(&logits))
        .expect("softmax output is a valid distribution"))
}

/// `z = M(h_1, ..., h_M)` over the ordered concatenation of the embeddings.
pub fn aggregate_context(
    aggregator: &Mlp,
    store: &ParamStore,
    embeddings: &[Vec<f64>],
) -> Result<Vec<f64>, ModelError> {
    let joined: Vec<f64> = embeddings.iter().flatten().copied().collect();
    aggregator.apply(store, &joined)
}

/// `log(clamp(p, 1e-6, 1))` elementwise.
pub fn to_leaf_inputs(p: &PredictiveDistribution) -> Vec<f64> {
    p.probs()
        .iter()
        .map(|&x| x.clamp(LEAF_EPSILON, 1.0).ln())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(store: &mut ParamStore, id: ParamId, t: Tensor) {
        *store.value_mut(id) = t;
    }

    #[test]
    fn identity_linear_encoder_is_identity() {
        let mut store = ParamStore::new();
        let mlp = Mlp::register(&mut store, "enc", MlpSpec::new(3, vec![3], Activation::Relu), 0).unwrap();
        set(&mut store, mlp.layers[0].weight, Tensor::identity(3));
        set(&mut store, mlp.layers[0].bias, Tensor::zeros(1, 3));
        let x = [0.5, -2.0, 7.25];
        assert_eq!(encode(&mlp, &store, &x).unwrap(), x.to_vec());
    }

    #[test]
    fn zero_aggregator_returns_bias() {
        let mut store = ParamStore::new();
        let mlp = Mlp::register(&mut store, "agg", MlpSpec::new(4, vec![3, 2], Activation::Relu), 1).unwrap();
        for id in mlp.param_ids() {
            let (r, c) = store.value(id).shape();
            set(&mut store, id, Tensor::zeros(r, c));
        }
        set(&mut store, mlp.layers[1].bias, Tensor::row_vector(vec![0.25, -1.5]));
        let z = aggregate_context(&mlp, &store, &[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(z, vec![0.25, -1.5]);
    }

    #[test]
    fn saturated_predictor_is_one_hot() {
        let mut store = ParamStore::new();
        let mlp = Mlp::register(&mut store, "pred", MlpSpec::new(1, vec![3], Activation::Relu), 2).unwrap();
        set(&mut store, mlp.layers[0].weight, Tensor::zeros(1, 3));
        set(&mut store, mlp.layers[0].bias, Tensor::row_vector(vec![0.0, 1000.0, 0.0]));
        let p = predict_unimodal(&mlp, &store, &[0.3]).unwrap();
        assert!((p.probs()[1] - 1.0).abs() < 1e-12);
        assert!(p.probs()[0] < 1e-12);
    }

    #[test]
    fn leaf_inputs_clamp() {
        let p = PredictiveDistribution::new(vec![1.0, 0.0]).unwrap();
        let v = to_leaf_inputs(&p);
        assert_eq!(v[0], 0.0);
        assert_eq!(v[1], 1e-6f64.ln());
        assert!((v[1] + 13.815_510_557_964_274).abs() < 1e-12);
    }

    #[test]
    fn initialization_depends_on_name_not_order() {
        let spec = MlpSpec::new(2, vec![2], Activation::Relu);
        let mut a = ParamStore::new();
        Mlp::register(&mut a, "x", spec.clone(), 5).unwrap();
        let ma = Mlp::register(&mut a, "y", spec.clone(), 5).unwrap();
        let mut b = ParamStore::new();
        let mb = Mlp::register(&mut b, "y", spec, 5).unwrap();
        assert_eq!(a.value(ma.input_weight()), b.value(mb.input_weight()));
    }

    #[test]
    fn rejects_bad_specs_and_inputs() {
        let mut store = ParamStore::new();
        assert!(Mlp::register(&mut store, "e", MlpSpec::new(2, vec![], Activation::Relu), 0).is_err());
        assert!(Mlp::register(&mut store, "f", MlpSpec::new(2, vec![0], Activation::Relu), 0).is_err());
        let m = Mlp::register(&mut store, "g", MlpSpec::new(2, vec![2], Activation::Tanh), 0).unwrap();
        assert!(matches!(
            m.apply(&store, &[1.0]),
            Err(ModelError::Dimension { expected: 2, got: 1, .. })
        ));
    }
}
