//! Probabilistic circuits over the unimodal leaf inputs `p_1..p_M` and the
//! target `Y`.
//!
//! A [`Circuit`] is a DAG of sum, product and leaf nodes stored in
//! topological order (children before parents). Modality variables carry
//! univariate Gaussian leaves, the target carries categorical leaves.
//! Evaluation is exact and happens entirely in log space; marginalizing a
//! variable replaces its leaves by `log 1 = 0`.
//!
//! Modality and dimension indices are zero-based throughout.

mod build;
mod eval;
pub mod format;
mod validate;

use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{softmax, Tensor};
use crate::distribution::PredictiveDistribution;

pub use build::{build_random_tensorized, StructureConfig};
pub use eval::{CircuitOp, CompiledCircuit, LeafParams};
pub use validate::{validate, ValidationReport, Violation, ViolationKind};

/// Tolerance on each row of a [`WeightAssignment`].
pub const WEIGHT_ROW_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum CircuitError {
    #[error("invalid circuit: {0}")]
    Invalid(ValidationReport),
    #[error("expected evidence for {expected} modalities, got {got}")]
    ModalityCount { expected: usize, got: usize },
    #[error("modality {modality}: expected {expected} evidence values, got {got}")]
    EvidenceDim {
        modality: usize,
        expected: usize,
        got: usize,
    },
    #[error("expected {expected} weight rows, got {got}")]
    WeightRows { expected: usize, got: usize },
    #[error("weight slot {slot}: expected arity {expected}, got {got}")]
    WeightArity {
        slot: usize,
        expected: usize,
        got: usize,
    },
    #[error("weight slot {slot} is not a normalized nonnegative row")]
    WeightRowInvalid { slot: usize },
    #[error("target class {class} out of range for {num_classes} classes")]
    TargetOutOfRange { class: usize, num_classes: usize },
    #[error("target is observed by the mask but no target class was given")]
    MissingTarget,
    #[error("posterior over the target requires the target to be unmarginalized")]
    TargetMarginalized,
    #[error("mask marginalizes modality {modality}, but the circuit has {num_modalities}")]
    MaskOutOfRange {
        modality: usize,
        num_modalities: usize,
    },
    #[error("depth {depth} cannot be realized: modality {modality} has {dims} dims, needs at least {needed}")]
    DepthTooLarge {
        depth: usize,
        modality: usize,
        dims: usize,
        needed: usize,
    },
    #[error("invalid structure argument: {0}")]
    InvalidArgument(String),
}

/// A random variable of the fused joint `P(Y, p_1, ..., p_M)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariableId {
    Modality { index: usize, dim: usize },
    Target,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeafDistribution {
    Gaussian {
        mean: f64,
        log_std: f64,
    },
    Categorical {
        #[serde(with = "crate::io::floats")]
        logits: Vec<f64>,
    },
}

impl LeafDistribution {
    /// Normalized class probabilities of a categorical leaf.
    pub fn categorical_probs(&self) -> Option<Vec<f64>> {
        match self {
            LeafDistribution::Categorical { logits } => Some(softmax(logits)),
            LeafDistribution::Gaussian { .. } => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum CircuitNode {
    Leaf {
        var: VariableId,
        dist: LeafDistribution,
    },
    Product {
        children: Vec<usize>,
    },
    Sum {
        children: Vec<usize>,
        weight_slot: usize,
    },
}

impl CircuitNode {
    pub fn children(&self) -> &[usize] {
        match self {
            CircuitNode::Leaf { .. } => &[],
            CircuitNode::Product { children } | CircuitNode::Sum { children, .. } => children,
        }
    }
}

/// Which variables a query sums out.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarginalMask {
    pub marginalized_modalities: Vec<usize>,
    pub target_marginalized: bool,
}

impl MarginalMask {
    /// Nothing marginalized.
    pub fn none() -> Self {
        Self::default()
    }

    pub fn modality(m: usize) -> Self {
        Self {
            marginalized_modalities: vec![m],
            target_marginalized: false,
        }
    }

    pub fn modalities(ms: impl IntoIterator<Item = usize>) -> Self {
        Self {
            marginalized_modalities: ms.into_iter().collect(),
            target_marginalized: false,
        }
    }

    pub fn everything(num_modalities: usize) -> Self {
        Self {
            marginalized_modalities: (0..num_modalities).collect(),
            target_marginalized: true,
        }
    }

    pub fn with_target_marginalized(mut self) -> Self {
        self.target_marginalized = true;
        self
    }

    pub fn is_marginalized(&self, m: usize) -> bool {
        self.marginalized_modalities.contains(&m)
    }

    pub(crate) fn modality_flags(&self, num_modalities: usize) -> Result<Vec<bool>, CircuitError> {
        let mut flags = vec![false; num_modalities];
        for &m in &self.marginalized_modalities {
            if m >= num_modalities {
                return Err(CircuitError::MaskOutOfRange {
                    modality: m,
                    num_modalities,
                });
            }
            flags[m] = true;
        }
        Ok(flags)
    }
}

/// Observed values for one query. `features[m]` is ignored (and may be empty)
/// when modality `m` is marginalized.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Evidence {
    pub features: Vec<Vec<f64>>,
    pub target: Option<usize>,
}

impl Evidence {
    pub fn new(features: Vec<Vec<f64>>) -> Self {
        Self {
            features,
            target: None,
        }
    }

    pub fn with_target(mut self, class: usize) -> Self {
        self.target = Some(class);
        self
    }
}

/// Normalized sum-node weights, one row per weight slot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightAssignment {
    rows: Vec<Vec<f64>>,
}

impl WeightAssignment {
    /// Checks that every row is nonnegative and sums to one.
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self, CircuitError> {
        for (slot, row) in rows.iter().enumerate() {
            let ok = !row.is_empty()
                && row.iter().all(|w| w.is_finite() && *w >= 0.0)
                && (row.iter().sum::<f64>() - 1.0).abs() <= WEIGHT_ROW_TOLERANCE;
            if !ok {
                return Err(CircuitError::WeightRowInvalid { slot });
            }
        }
        Ok(Self { rows })
    }

    /// Row-wise softmax of unnormalized logits.
    pub fn from_logits(logits: &[Vec<f64>]) -> Self {
        Self {
            rows: logits.iter().map(|r| softmax(r)).collect(),
        }
    }

    /// Uniform rows of the given arities.
    pub fn uniform(arities: &[usize]) -> Self {
        Self {
            rows: arities.iter().map(|&a| vec![1.0 / a as f64; a]).collect(),
        }
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn row(&self, slot: usize) -> &[f64] {
        &self.rows[slot]
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    /// Log-weights flattened in slot order as a `1 x W` tensor.
    pub fn to_log_tensor(&self) -> Tensor {
        Tensor::row_vector(self.rows.iter().flatten().map(|w| w.ln()).collect())
    }

    /// Splits a flat row of normalized weights (slot order) into rows.
    pub fn from_flat(flat: &[f64], arities: &[usize]) -> Result<Self, CircuitError> {
        let total: usize = arities.iter().sum();
        if flat.len() != total {
            return Err(CircuitError::WeightRows {
                expected: total,
                got: flat.len(),
            });
        }
        let mut rows = Vec::with_capacity(arities.len());
        let mut start = 0;
        for &a in arities {
            rows.push(flat[start..start + a].to_vec());
            start += a;
        }
        Self::new(rows)
    }
}

/// A probabilistic circuit: structure plus leaf parameters.
///
/// Construction does not validate; call [`validate`] for a report or use any
/// evaluation method, which refuses invalid circuits.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Circuit {
    num_modalities: usize,
    num_classes: usize,
    leaf_dims: Vec<usize>,
    root: usize,
    nodes: Vec<CircuitNode>,
    #[serde(skip)]
    compiled: OnceLock<Result<Arc<CompiledCircuit>, ValidationReport>>,
}

impl PartialEq for Circuit {
    fn eq(&self, other: &Self) -> bool {
        self.num_modalities == other.num_modalities
            && self.num_classes == other.num_classes
            && self.leaf_dims == other.leaf_dims
            && self.root == other.root
            && self.nodes == other.nodes
    }
}

impl Circuit {
    pub fn new(
        num_classes: usize,
        leaf_dims: Vec<usize>,
        nodes: Vec<CircuitNode>,
        root: usize,
    ) -> Self {
        Self {
            num_modalities: leaf_dims.len(),
            num_classes,
            leaf_dims,
            root,
            nodes,
            compiled: OnceLock::new(),
        }
    }

    pub fn num_modalities(&self) -> usize {
        self.num_modalities
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn leaf_dims(&self) -> &[usize] {
        &self.leaf_dims
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn nodes(&self) -> &[CircuitNode] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Every variable the root must cover: all modality dims, then the target.
    pub fn variables(&self) -> Vec<VariableId> {
        let mut vars: Vec<VariableId> = self
            .leaf_dims
            .iter()
            .enumerate()
            .flat_map(|(m, &d)| (0..d).map(move |dim| VariableId::Modality { index: m, dim }))
            .collect();
        vars.push(VariableId::Target);
        vars
    }

    /// Validated evaluation plan (cached).
    pub fn compiled(&self) -> Result<Arc<CompiledCircuit>, CircuitError> {
        self.compiled
            .get_or_init(|| CompiledCircuit::new(self).map(Arc::new))
            .clone()
            .map_err(CircuitError::Invalid)
    }

    /// `(weight_slot, arity)` for every sum node, ordered by slot.
    pub fn weight_layout(&self) -> Result<Vec<(usize, usize)>, CircuitError> {
        Ok(self
            .compiled()?
            .slot_arities()
            .iter()
            .copied()
            .enumerate()
            .collect())
    }

    /// Arity of every weight slot, ordered by slot.
    pub fn slot_arities(&self) -> Result<Vec<usize>, CircuitError> {
        Ok(self.compiled()?.slot_arities().to_vec())
    }

    /// Leaf parameters gathered in node order.
    pub fn leaf_params(&self) -> Result<LeafParams, CircuitError> {
        Ok(self.compiled()?.gather_leaf_params(self))
    }

    /// Replaces leaf parameters (in the order of [`Circuit::leaf_params`]).
    pub fn set_leaf_params(&mut self, params: &LeafParams) -> Result<(), CircuitError> {
        let plan = self.compiled()?;
        plan.scatter_leaf_params(&mut self.nodes, params);
        Ok(())
    }

    /// Log of the (possibly marginal) density of `evidence` under `mask`.
    ///
    /// Returns `-inf` rather than failing when a categorical leaf gives the
    /// observed class zero probability.
    pub fn log_evaluate(
        &self,
        weights: &WeightAssignment,
        evidence: &Evidence,
        mask: &MarginalMask,
    ) -> Result<f64, CircuitError> {
        let plan = self.compiled()?;
        let target = if mask.target_marginalized {
            0
        } else {
            let y = evidence.target.ok_or(CircuitError::MissingTarget)?;
            if y >= self.num_classes {
                return Err(CircuitError::TargetOutOfRange {
                    class: y,
                    num_classes: self.num_classes,
                });
            }
            y
        };
        let scores = plan.joint_scores(self, weights, &evidence.features, mask)?;
        Ok(scores[target])
    }

    /// `P(Y | unmasked evidence)`, normalizing `log P(Y = k, evidence)` over k.
    pub fn posterior_over_target(
        &self,
        weights: &WeightAssignment,
        features: &[Vec<f64>],
        mask: &MarginalMask,
    ) -> Result<PredictiveDistribution, CircuitError> {
        if mask.target_marginalized {
            return Err(CircuitError::TargetMarginalized);
        }
        let plan = self.compiled()?;
        let scores = plan.joint_scores(self, weights, features, mask)?;
        Ok(PredictiveDistribution::from_log_scores(&scores)
            .expect("softmax of circuit scores is a valid distribution"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Root sum with weights (0.3, 0.7) over point masses on classes 0 and 1.
    fn point_mass_mixture() -> (Circuit, WeightAssignment) {
        let nodes = vec![
            CircuitNode::Leaf {
                var: VariableId::Target,
                dist: LeafDistribution::Categorical {
                    logits: vec![0.0, f64::NEG_INFINITY],
                },
            },
            CircuitNode::Leaf {
                var: VariableId::Target,
                dist: LeafDistribution::Categorical {
                    logits: vec![f64::NEG_INFINITY, 0.0],
                },
            },
            CircuitNode::Sum {
                children: vec![0, 1],
                weight_slot: 0,
            },
        ];
        let circuit = Circuit::new(2, vec![], nodes, 2);
        let weights = WeightAssignment::new(vec![vec![0.3, 0.7]]).unwrap();
        (circuit, weights)
    }

    #[test]
    fn hand_built_mixture_log_probability() {
        let (circuit, weights) = point_mass_mixture();
        let ev = Evidence::new(vec![]).with_target(0);
        let lp = circuit.log_evaluate(&weights, &ev, &MarginalMask::none()).unwrap();
        assert!((lp - 0.3f64.ln()).abs() < 1e-15);
        let post = circuit
            .posterior_over_target(&weights, &[], &MarginalMask::none())
            .unwrap();
        assert!((post.probs()[0] - 0.3).abs() < 1e-15);
        assert!((post.probs()[1] - 0.7).abs() < 1e-15);
    }

    #[test]
    fn zero_probability_class_gives_negative_infinity() {
        let nodes = vec![CircuitNode::Leaf {
            var: VariableId::Target,
            dist: LeafDistribution::Categorical {
                logits: vec![0.0, f64::NEG_INFINITY],
            },
        }];
        let circuit = Circuit::new(2, vec![], nodes, 0);
        let w = WeightAssignment::new(vec![]).unwrap();
        let lp = circuit
            .log_evaluate(&w, &Evidence::new(vec![]).with_target(1), &MarginalMask::none())
            .unwrap();
        assert_eq!(lp, f64::NEG_INFINITY);
    }

    #[test]
    fn everything_marginalized_is_log_one() {
        let (circuit, weights) = point_mass_mixture();
        let lp = circuit
            .log_evaluate(&weights, &Evidence::default(), &MarginalMask::everything(0))
            .unwrap();
        assert!(lp.abs() < 1e-15, "{lp}");
    }

    #[test]
    fn query_errors() {
        let (circuit, weights) = point_mass_mixture();
        assert_eq!(
            circuit.log_evaluate(&weights, &Evidence::default(), &MarginalMask::none()),
            Err(CircuitError::MissingTarget)
        );
        assert_eq!(
            circuit.log_evaluate(
                &weights,
                &Evidence::default().with_target(5),
                &MarginalMask::none()
            ),
            Err(CircuitError::TargetOutOfRange {
                class: 5,
                num_classes: 2
            })
        );
        assert_eq!(
            circuit.posterior_over_target(&weights, &[], &MarginalMask::everything(0)),
            Err(CircuitError::TargetMarginalized)
        );
        let bad = WeightAssignment::new(vec![vec![0.5, 0.25, 0.25]]).unwrap();
        assert_eq!(
            circuit.posterior_over_target(&bad, &[], &MarginalMask::none()),
            Err(CircuitError::WeightArity {
                slot: 0,
                expected: 2,
                got: 3
            })
        );
        assert_eq!(
            circuit.posterior_over_target(&weights, &[], &MarginalMask::modality(0)),
            Err(CircuitError::MaskOutOfRange {
                modality: 0,
                num_modalities: 0
            })
        );
    }

    #[test]
    fn weight_assignment_validation() {
        assert!(WeightAssignment::new(vec![vec![0.5, 0.5]]).is_ok());
        assert_eq!(
            WeightAssignment::new(vec![vec![0.5, 0.5], vec![1.2, -0.2]]),
            Err(CircuitError::WeightRowInvalid { slot: 1 })
        );
        let w = WeightAssignment::from_logits(&[vec![3f64.ln(), 7f64.ln()]]);
        assert!((w.row(0)[0] - 0.3).abs() < 1e-15);
        assert!((w.row(0)[1] - 0.7).abs() < 1e-15);
    }
}
