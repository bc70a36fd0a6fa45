use std::sync::Arc;

use super::validate::{scopes, validate, ValidationReport};
use super::{
    Circuit, CircuitError, CircuitNode, LeafDistribution, MarginalMask, VariableId,
    WeightAssignment,
};
use crate::autodiff::{CustomOp, OpCache, Tensor};

/// Leaf parameters of a circuit, each list in node order.
#[derive(Clone, Debug, PartialEq)]
pub struct LeafParams {
    pub gaussian_means: Vec<f64>,
    pub gaussian_log_stds: Vec<f64>,
    /// One row of `K` logits per categorical leaf.
    pub categorical_logits: Tensor,
}

#[derive(Clone, Copy, Debug)]
enum Step {
    Gaussian {
        column: usize,
        modality: usize,
        param: usize,
    },
    Categorical {
        param: usize,
    },
    Product {
        start: usize,
        end: usize,
    },
    Sum {
        start: usize,
        end: usize,
        weight_offset: usize,
    },
}

/// Validated, flattened evaluation plan for a [`Circuit`].
///
/// Every node owns a slot in a per-instance value buffer. Nodes whose scope
/// contains the target are *wide*: they hold `K` log-values, one per target
/// class, so a single bottom-up pass yields `log P(Y = k, evidence)` for all
/// `k` at once. Other nodes hold a single log-value.
#[derive(Debug)]
pub struct CompiledCircuit {
    num_classes: usize,
    num_modalities: usize,
    leaf_dims: Vec<usize>,
    evidence_offsets: Vec<usize>,
    evidence_width: usize,
    steps: Vec<Step>,
    offsets: Vec<usize>,
    wide: Vec<bool>,
    buffer_len: usize,
    /// Start of each sum node's block in the per-instance ratio buffer.
    ratio_offsets: Vec<usize>,
    ratio_len: usize,
    children: Vec<usize>,
    root: usize,
    slot_arities: Vec<usize>,
    slot_offsets: Vec<usize>,
    weight_width: usize,
    gaussian_nodes: Vec<usize>,
    categorical_nodes: Vec<usize>,
}

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

impl CompiledCircuit {
    pub fn new(circuit: &Circuit) -> Result<Self, ValidationReport> {
        let report = validate(circuit);
        if !report.is_ok() {
            return Err(report);
        }

        let k = circuit.num_classes();
        let mut evidence_offsets = Vec::with_capacity(circuit.num_modalities());
        let mut width = 0;
        for &d in circuit.leaf_dims() {
            evidence_offsets.push(width);
            width += d;
        }

        let scopes = scopes(circuit);
        let mut steps = Vec::with_capacity(circuit.len());
        let mut offsets = Vec::with_capacity(circuit.len());
        let mut wide = Vec::with_capacity(circuit.len());
        let mut children = Vec::new();
        let mut buffer_len = 0;
        let mut ratio_offsets = Vec::with_capacity(circuit.len());
        let mut ratio_len = 0;
        let mut gaussian_nodes = Vec::new();
        let mut categorical_nodes = Vec::new();
        let mut sum_slots: Vec<(usize, usize, usize)> = Vec::new(); // (step, slot, arity)

        for (i, node) in circuit.nodes().iter().enumerate() {
            let is_wide = scopes[i].contains(&VariableId::Target);
            let step = match node {
                CircuitNode::Leaf { var, .. } => match var {
                    VariableId::Modality { index, dim } => {
                        gaussian_nodes.push(i);
                        Step::Gaussian {
                            column: evidence_offsets[*index] + dim,
                            modality: *index,
                            param: gaussian_nodes.len() - 1,
                        }
                    }
                    VariableId::Target => {
                        categorical_nodes.push(i);
                        Step::Categorical {
                            param: categorical_nodes.len() - 1,
                        }
                    }
                },
                CircuitNode::Product { children: cs } => {
                    let start = children.len();
                    children.extend_from_slice(cs);
                    Step::Product {
                        start,
                        end: children.len(),
                    }
                }
                CircuitNode::Sum {
                    children: cs,
                    weight_slot,
                } => {
                    let start = children.len();
                    children.extend_from_slice(cs);
                    sum_slots.push((i, *weight_slot, cs.len()));
                    Step::Sum {
                        start,
                        end: children.len(),
                        weight_offset: 0,
                    }
                }
            };
            ratio_offsets.push(ratio_len);
            if let CircuitNode::Sum { children: cs, .. } = node {
                ratio_len += cs.len() * if is_wide { k } else { 1 };
            }
            steps.push(step);
            offsets.push(buffer_len);
            wide.push(is_wide);
            buffer_len += if is_wide { k } else { 1 };
        }

        // Validation guarantees slots are exactly 0..n_sums.
        let mut slot_arities = vec![0; sum_slots.len()];
        for &(_, slot, arity) in &sum_slots {
            slot_arities[slot] = arity;
        }
        let mut slot_offsets = Vec::with_capacity(slot_arities.len());
        let mut w = 0;
        for &a in &slot_arities {
            slot_offsets.push(w);
            w += a;
        }
        for &(i, slot, _) in &sum_slots {
            if let Step::Sum { weight_offset, .. } = &mut steps[i] {
                *weight_offset = slot_offsets[slot];
            }
        }

        Ok(Self {
            num_classes: k,
            num_modalities: circuit.num_modalities(),
            leaf_dims: circuit.leaf_dims().to_vec(),
            evidence_offsets,
            evidence_width: width,
            steps,
            offsets,
            wide,
            buffer_len,
            ratio_offsets,
            ratio_len,
            children,
            root: circuit.root(),
            slot_arities,
            slot_offsets,
            weight_width: w,
            gaussian_nodes,
            categorical_nodes,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_modalities(&self) -> usize {
        self.num_modalities
    }

    pub fn leaf_dims(&self) -> &[usize] {
        &self.leaf_dims
    }

    /// Width of the flattened evidence row (sum of leaf dims).
    pub fn evidence_width(&self) -> usize {
        self.evidence_width
    }

    /// Column where modality `m` starts in the evidence row.
    pub fn evidence_offset(&self, m: usize) -> usize {
        self.evidence_offsets[m]
    }

    pub fn slot_arities(&self) -> &[usize] {
        &self.slot_arities
    }

    /// Column where each slot's weights start in the flat weight row.
    pub fn slot_offsets(&self) -> &[usize] {
        &self.slot_offsets
    }

    /// Total number of sum-node weights.
    pub fn weight_width(&self) -> usize {
        self.weight_width
    }

    pub fn num_gaussian_leaves(&self) -> usize {
        self.gaussian_nodes.len()
    }

    pub fn num_categorical_leaves(&self) -> usize {
        self.categorical_nodes.len()
    }

    pub(crate) fn gather_leaf_params(&self, circuit: &Circuit) -> LeafParams {
        let nodes = circuit.nodes();
        let mut means = Vec::with_capacity(self.gaussian_nodes.len());
        let mut log_stds = Vec::with_capacity(self.gaussian_nodes.len());
        for &i in &self.gaussian_nodes {
            if let CircuitNode::Leaf {
                dist: LeafDistribution::Gaussian { mean, log_std },
                ..
            } = &nodes[i]
            {
                means.push(*mean);
                log_stds.push(*log_std);
            }
        }
        let mut logits = Vec::with_capacity(self.categorical_nodes.len() * self.num_classes);
        for &i in &self.categorical_nodes {
            if let CircuitNode::Leaf {
                dist: LeafDistribution::Categorical { logits: l },
                ..
            } = &nodes[i]
            {
                logits.extend_from_slice(l);
            }
        }
        LeafParams {
            gaussian_means: means,
            gaussian_log_stds: log_stds,
            categorical_logits: Tensor::from_vec(
                self.categorical_nodes.len(),
                self.num_classes,
                logits,
            ),
        }
    }

    pub(crate) fn scatter_leaf_params(&self, nodes: &mut [CircuitNode], params: &LeafParams) {
        assert_eq!(params.gaussian_means.len(), self.gaussian_nodes.len());
        assert_eq!(params.gaussian_log_stds.len(), self.gaussian_nodes.len());
        assert_eq!(
            params.categorical_logits.shape(),
            (self.categorical_nodes.len(), self.num_classes)
        );
        for (j, &i) in self.gaussian_nodes.iter().enumerate() {
            if let CircuitNode::Leaf {
                dist: LeafDistribution::Gaussian { mean, log_std },
                ..
            } = &mut nodes[i]
            {
                *mean = params.gaussian_means[j];
                *log_std = params.gaussian_log_stds[j];
            }
        }
        for (j, &i) in self.categorical_nodes.iter().enumerate() {
            if let CircuitNode::Leaf {
                dist: LeafDistribution::Categorical { logits },
                ..
            } = &mut nodes[i]
            {
                logits.copy_from_slice(params.categorical_logits.row(j));
            }
        }
    }

    /// Checks a weight assignment against the slot arities.
    pub fn check_weights(&self, weights: &WeightAssignment) -> Result<(), CircuitError> {
        if weights.num_rows() != self.slot_arities.len() {
            return Err(CircuitError::WeightRows {
                expected: self.slot_arities.len(),
                got: weights.num_rows(),
            });
        }
        for (slot, (&a, row)) in self.slot_arities.iter().zip(weights.rows()).enumerate() {
            if row.len() != a {
                return Err(CircuitError::WeightArity {
                    slot,
                    expected: a,
                    got: row.len(),
                });
            }
        }
        Ok(())
    }

    /// Flattens per-modality features into one evidence row. Marginalized
    /// modalities are zero-filled and never read.
    pub fn evidence_row(
        &self,
        features: &[Vec<f64>],
        marginalized: &[bool],
    ) -> Result<Vec<f64>, CircuitError> {
        if features.len() != self.num_modalities {
            // Fully marginalized queries may omit features altogether.
            if !(features.is_empty() && marginalized.iter().all(|&m| m)) {
                return Err(CircuitError::ModalityCount {
                    expected: self.num_modalities,
                    got: features.len(),
                });
            }
        }
        let mut row = vec![0.0; self.evidence_width];
        for (m, &d) in self.leaf_dims.iter().enumerate() {
            if marginalized[m] {
                continue;
            }
            let f = &features[m];
            if f.len() != d {
                return Err(CircuitError::EvidenceDim {
                    modality: m,
                    expected: d,
                    got: f.len(),
                });
            }
            let o = self.evidence_offsets[m];
            row[o..o + d].copy_from_slice(f);
        }
        Ok(row)
    }

    /// `log P(Y = k, unmasked evidence)` for every class `k` (all equal when
    /// the target is marginalized).
    pub(crate) fn joint_scores(
        self: &Arc<Self>,
        circuit: &Circuit,
        weights: &WeightAssignment,
        features: &[Vec<f64>],
        mask: &MarginalMask,
    ) -> Result<Vec<f64>, CircuitError> {
        self.check_weights(weights)?;
        let flags = mask.modality_flags(self.num_modalities)?;
        let evidence = Tensor::row_vector(self.evidence_row(features, &flags)?);
        let leaves = self.gather_leaf_params(circuit);
        let kernel = CircuitOp::new_with_flags(Arc::clone(self), flags, mask.target_marginalized);
        let (out, _) = kernel.run_forward(
            &evidence,
            &weights.to_log_tensor(),
            &leaves.gaussian_means,
            &leaves.gaussian_log_stds,
            &leaves.categorical_logits,
            false,
        );
        Ok(out.row(0).to_vec())
    }
}

/// Tape kernel computing `log P(Y = k, evidence)` for a batch.
///
/// Inputs, in order:
/// 1. evidence `B x V` (flattened leaf inputs of all modalities),
/// 2. log-weights `B x W` (per-instance, e.g. from a hypernetwork) or
///    `1 x W` (shared),
/// 3. Gaussian means `1 x G`,
/// 4. Gaussian log standard deviations `1 x G`,
/// 5. categorical logits `C x K`.
///
/// Output is `B x K`. Marginalized leaves contribute `log 1 = 0`.
#[derive(Debug)]
pub struct CircuitOp {
    plan: Arc<CompiledCircuit>,
    marginalized: Vec<bool>,
    target_marginalized: bool,
}

struct ForwardCache {
    inv_std: Vec<f64>,
    cat_log_probs: Tensor,
    /// Per instance, each sum node's child posteriors `exp(child + log w - sum)`,
    /// one block of output lanes per child. Empty when not requested.
    ratios: Vec<f64>,
    ratio_len: usize,
}

impl CircuitOp {
    pub fn new(plan: Arc<CompiledCircuit>, mask: &MarginalMask) -> Result<Self, CircuitError> {
        let flags = mask.modality_flags(plan.num_modalities)?;
        Ok(Self::new_with_flags(plan, flags, mask.target_marginalized))
    }

    fn new_with_flags(plan: Arc<CompiledCircuit>, marginalized: Vec<bool>, target_marginalized: bool) -> Self {
        Self {
            plan,
            marginalized,
            target_marginalized,
        }
    }

    fn run_forward(
        &self,
        evidence: &Tensor,
        log_weights: &Tensor,
        means: &[f64],
        log_stds: &[f64],
        cat_logits: &Tensor,
        keep_ratios: bool,
    ) -> (Tensor, ForwardCache) {
        let plan = &*self.plan;
        let k = plan.num_classes;
        let batch = evidence.rows();
        assert_eq!(evidence.cols(), plan.evidence_width, "circuit evidence width");
        assert_eq!(log_weights.cols(), plan.weight_width, "circuit weight width");
        assert!(
            log_weights.rows() == 1 || log_weights.rows() == batch,
            "circuit log-weights must have 1 or B rows"
        );
        assert_eq!(means.len(), plan.gaussian_nodes.len());
        assert_eq!(log_stds.len(), plan.gaussian_nodes.len());
        assert_eq!(cat_logits.shape(), (plan.categorical_nodes.len(), k));

        let inv_std: Vec<f64> = log_stds.iter().map(|s| (-s).exp()).collect();
        let mut cat_log_probs = cat_logits.clone();
        for r in 0..cat_log_probs.rows() {
            crate::autodiff::log_softmax_in_place(cat_log_probs.row_mut(r));
        }

        let ratio_len = if keep_ratios { plan.ratio_len } else { 0 };
        let mut ratios = vec![0.0; batch * ratio_len];
        let mut vals = vec![0.0; plan.buffer_len];
        let mut out = Tensor::zeros(batch, k);
        let mut max = vec![0.0; k];
        let mut acc = vec![0.0; k];
        for b in 0..batch {
            let rs = &mut ratios[b * ratio_len..(b + 1) * ratio_len];
            let x = evidence.row(b);
            let lw = log_weights.row(if log_weights.rows() == 1 { 0 } else { b });
            for (i, step) in plan.steps.iter().enumerate() {
                let o = plan.offsets[i];
                let w = if plan.wide[i] { k } else { 1 };
                // Children always precede their parent in the buffer.
                let (done, rest) = vals.split_at_mut(o);
                let dst = &mut rest[..w];
                match *step {
                    Step::Gaussian {
                        column,
                        modality,
                        param,
                    } => {
                        dst[0] = if self.marginalized[modality] {
                            0.0
                        } else {
                            let z = (x[column] - means[param]) * inv_std[param];
                            -0.5 * z * z - log_stds[param] - HALF_LN_2PI
                        };
                    }
                    Step::Categorical { param } => {
                        if self.target_marginalized {
                            dst.fill(0.0);
                        } else {
                            dst.copy_from_slice(cat_log_probs.row(param));
                        }
                    }
                    Step::Product { start, end } => {
                        dst.fill(0.0);
                        for &c in &plan.children[start..end] {
                            let co = plan.offsets[c];
                            if plan.wide[c] {
                                for (s, v) in dst.iter_mut().zip(&done[co..co + k]) {
                                    *s += v;
                                }
                            } else {
                                let v = done[co];
                                dst.iter_mut().for_each(|s| *s += v);
                            }
                        }
                    }
                    Step::Sum {
                        start,
                        end,
                        weight_offset,
                    } => {
                        let cs = &plan.children[start..end];
                        let n = cs.len();
                        let lws = &lw[weight_offset..weight_offset + n];
                        let max = &mut max[..w];
                        let acc = &mut acc[..w];
                        max.fill(f64::NEG_INFINITY);
                        acc.fill(0.0);
                        for (&c, &l) in cs.iter().zip(lws) {
                            let co = plan.offsets[c];
                            for (j, m) in max.iter_mut().enumerate() {
                                let t = done[co + j] + l;
                                if t > *m {
                                    *m = t;
                                }
                            }
                        }
                        let base = if keep_ratios { plan.ratio_offsets[i] } else { 0 };
                        for (ci, (&c, &l)) in cs.iter().zip(lws).enumerate() {
                            let co = plan.offsets[c];
                            for j in 0..w {
                                let e = if max[j] == f64::NEG_INFINITY {
                                    0.0
                                } else {
                                    (done[co + j] + l - max[j]).exp()
                                };
                                acc[j] += e;
                                if keep_ratios {
                                    rs[base + ci * w + j] = e;
                                }
                            }
                        }
                        for j in 0..w {
                            dst[j] = if max[j] == f64::NEG_INFINITY {
                                f64::NEG_INFINITY
                            } else {
                                max[j] + acc[j].ln()
                            };
                            // Reused as the normalizer for the ratios below.
                            acc[j] = if acc[j] > 0.0 { 1.0 / acc[j] } else { 0.0 };
                        }
                        if keep_ratios {
                            for block in rs[base..base + n * w].chunks_exact_mut(w) {
                                for (r, inv) in block.iter_mut().zip(acc.iter()) {
                                    *r *= inv;
                                }
                            }
                        }
                    }
                }
            }
            let ro = plan.offsets[plan.root];
            out.row_mut(b).copy_from_slice(&vals[ro..ro + k]);
        }
        (
            out,
            ForwardCache {
                inv_std,
                cat_log_probs,
                ratios,
                ratio_len,
            },
        )
    }
}

impl CustomOp for CircuitOp {
    fn name(&self) -> &'static str {
        "circuit"
    }

    fn forward(&self, inputs: &[&Tensor]) -> (Tensor, OpCache) {
        let [evidence, lw, means, log_stds, cats] = inputs else {
            panic!("circuit op expects 5 inputs, got {}", inputs.len());
        };
        let (out, cache) = self.run_forward(evidence, lw, means.data(), log_stds.data(), cats, true);
        (out, Box::new(cache))
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        cache: &OpCache,
        grad_out: &Tensor,
        needs_grad: &[bool],
    ) -> Vec<Option<Tensor>> {
        let plan = &*self.plan;
        let cache = cache
            .downcast_ref::<ForwardCache>()
            .expect("circuit op cache type");
        let [evidence, lw_in, means, _log_stds, cats] = inputs else {
            panic!("circuit op expects 5 inputs");
        };
        let k = plan.num_classes;
        let batch = evidence.rows();
        let shared_weights = lw_in.rows() == 1;

        let mut g_evidence = Tensor::zeros(batch, plan.evidence_width);
        let mut g_lw = Tensor::zeros(lw_in.rows(), plan.weight_width);
        let mut g_means = Tensor::zeros(1, means.cols());
        let mut g_log_stds = Tensor::zeros(1, means.cols());
        let mut g_cats = Tensor::zeros(cats.rows(), k);

        let mut adj = vec![0.0; plan.buffer_len];
        for b in 0..batch {
            let x = evidence.row(b);
            let lw_row = if shared_weights { 0 } else { b };
            adj.fill(0.0);
            let ro = plan.offsets[plan.root];
            adj[ro..ro + k].copy_from_slice(grad_out.row(b));
            let rs = &cache.ratios[b * cache.ratio_len..(b + 1) * cache.ratio_len];

            for (i, step) in plan.steps.iter().enumerate().rev() {
                let o = plan.offsets[i];
                let w = if plan.wide[i] { k } else { 1 };
                if adj[o..o + w].iter().all(|&a| a == 0.0) {
                    continue;
                }
                match *step {
                    Step::Gaussian {
                        column,
                        modality,
                        param,
                    } => {
                        if self.marginalized[modality] {
                            continue;
                        }
                        let a = adj[o];
                        let inv = cache.inv_std[param];
                        let z = (x[column] - means.data()[param]) * inv;
                        g_evidence.row_mut(b)[column] -= a * z * inv;
                        g_means.data_mut()[param] += a * z * inv;
                        g_log_stds.data_mut()[param] += a * (z * z - 1.0);
                    }
                    Step::Categorical { param } => {
                        if self.target_marginalized {
                            continue;
                        }
                        let a = &adj[o..o + k];
                        let total: f64 = a.iter().sum();
                        let lp = cache.cat_log_probs.row(param);
                        for (j, g) in g_cats.row_mut(param).iter_mut().enumerate() {
                            *g += a[j] - lp[j].exp() * total;
                        }
                    }
                    Step::Product { start, end } => {
                        for &c in &plan.children[start..end] {
                            let co = plan.offsets[c];
                            if plan.wide[c] {
                                for j in 0..k {
                                    adj[co + j] += adj[o + j];
                                }
                            } else {
                                let s: f64 = adj[o..o + w].iter().sum();
                                adj[co] += s;
                            }
                        }
                    }
                    Step::Sum {
                        start,
                        end,
                        weight_offset,
                    } => {
                        let cs = &plan.children[start..end];
                        let g = &mut g_lw.row_mut(lw_row)[weight_offset..weight_offset + cs.len()];
                        let base = plan.ratio_offsets[i];
                        let (below, rest) = adj.split_at_mut(o);
                        let a = &rest[..w];
                        let blocks = rs[base..base + cs.len() * w].chunks_exact(w);
                        for ((gn, &c), r) in g.iter_mut().zip(cs).zip(blocks) {
                            let co = plan.offsets[c];
                            let mut total = 0.0;
                            for ((d, &aj), &rj) in below[co..co + w].iter_mut().zip(a).zip(r) {
                                let t = aj * rj;
                                *d += t;
                                total += t;
                            }
                            *gn += total;
                        }
                    }
                }
            }
        }

        let pick = |need: bool, t: Tensor| if need { Some(t) } else { None };
        vec![
            pick(needs_grad[0], g_evidence),
            pick(needs_grad[1], g_lw),
            pick(needs_grad[2], g_means),
            pick(needs_grad[3], g_log_stds),
            pick(needs_grad[4], g_cats),
        ]
    }
}
