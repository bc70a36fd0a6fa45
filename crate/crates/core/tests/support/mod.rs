//! Independent reference computations shared by the integration tests.
//!
//! The circuit oracle works in linear space with direct recursion over the
//! node list and approximates integrals over marginalized variables by
//! exhaustive enumeration of a fixed grid. It shares no code with the
//! log-space evaluator under test.

#![allow(dead_code)]

use c2mf::circuit::{
    build_random_tensorized, Circuit, CircuitNode, LeafDistribution, LeafParams, MarginalMask,
    StructureConfig, VariableId, WeightAssignment,
};
use c2mf::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GRID_POINTS: usize = 20;
/// Grid spacing. With leaf scales in `[1, 1.1]` and means in `[-1, 1]` the
/// Riemann sum of a Gaussian on this grid differs from 1 by about 1e-12
/// (aliasing) plus at most about 1e-10 (mass beyond the last point).
pub const GRID_STEP: f64 = 0.84;

pub fn grid() -> Vec<f64> {
    (0..GRID_POINTS)
        .map(|i| (i as f64 - (GRID_POINTS as f64 - 1.0) / 2.0) * GRID_STEP)
        .collect()
}

/// A random valid circuit with randomized leaf parameters and weights.
pub struct RandomCircuit {
    pub circuit: Circuit,
    pub weights: WeightAssignment,
}

/// Draws a circuit with `M <= 3` modalities, `K <= 3` classes, at most 12
/// leaf variables in total and at most 3 dims per modality.
pub fn random_circuit(rng: &mut ChaCha8Rng) -> RandomCircuit {
    let m_count = rng.random_range(1..=3);
    let k = rng.random_range(2..=3);
    let dims: Vec<usize> = (0..m_count).map(|_| rng.random_range(1..=3)).collect();
    let min_dim = *dims.iter().min().unwrap();
    let max_depth = if min_dim >= 2 { 2 } else { 1 };
    let structure = StructureConfig {
        depth: rng.random_range(1..=max_depth),
        num_sums: rng.random_range(1..=3),
        num_repetitions: rng.random_range(1..=2),
    };
    let mut circuit = build_random_tensorized(&dims, k, &structure, rng.random()).unwrap();
    let leaves = circuit.leaf_params().unwrap();
    let g = leaves.gaussian_means.len();
    let c = leaves.categorical_logits.rows();
    let params = LeafParams {
        gaussian_means: (0..g).map(|_| rng.random_range(-1.0..=1.0)).collect(),
        gaussian_log_stds: (0..g).map(|_| rng.random_range(0.0..=1.1f64.ln())).collect(),
        categorical_logits: Tensor::from_vec(c, k, (0..c * k).map(|_| rng.random_range(-2.0..2.0)).collect()),
    };
    circuit.set_leaf_params(&params).unwrap();
    let arities = circuit.slot_arities().unwrap();
    let logits: Vec<Vec<f64>> = arities
        .iter()
        .map(|&a| (0..a).map(|_| rng.random_range(-2.0..2.0)).collect())
        .collect();
    RandomCircuit {
        circuit,
        weights: WeightAssignment::from_logits(&logits),
    }
}

/// Linear-space density of a full assignment `(x, y)` by plain recursion.
pub fn naive_density(circuit: &Circuit, weights: &WeightAssignment, x: &[Vec<f64>], y: usize) -> f64 {
    let nodes = circuit.nodes();
    let mut memo: Vec<Option<f64>> = vec![None; nodes.len()];
    fn eval(
        i: usize,
        nodes: &[CircuitNode],
        weights: &WeightAssignment,
        x: &[Vec<f64>],
        y: usize,
        memo: &mut Vec<Option<f64>>,
    ) -> f64 {
        if let Some(v) = memo[i] {
            return v;
        }
        let v = match &nodes[i] {
            CircuitNode::Leaf { var, dist } => match (var, dist) {
                (VariableId::Modality { index, dim }, LeafDistribution::Gaussian { mean, log_std }) => {
                    let sigma = log_std.exp();
                    let d = x[*index][*dim] - mean;
                    (-(d * d) / (2.0 * sigma * sigma)).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
                }
                (VariableId::Target, LeafDistribution::Categorical { logits }) => {
                    let total: f64 = logits.iter().map(|l| l.exp()).sum();
                    logits[y].exp() / total
                }
                _ => panic!("leaf type does not match its variable"),
            },
            CircuitNode::Product { children } => children
                .iter()
                .map(|&c| eval(c, nodes, weights, x, y, memo))
                .product(),
            CircuitNode::Sum { children, weight_slot } => children
                .iter()
                .zip(weights.row(*weight_slot))
                .map(|(&c, &w)| w * eval(c, nodes, weights, x, y, memo))
                .sum(),
        };
        memo[i] = Some(v);
        v
    }
    eval(circuit.root(), nodes, weights, x, y, &mut memo)
}

/// Every assignment of `n` coordinates to grid points.
fn grid_assignments(n: usize) -> Vec<Vec<f64>> {
    let g = grid();
    let mut out = vec![Vec::new()];
    for _ in 0..n {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                g.iter().map(move |&v| {
                    let mut p = prefix.clone();
                    p.push(v);
                    p
                })
            })
            .collect();
    }
    out
}

/// `P(Y = y, unmasked evidence)` (or the evidence marginal when the target
/// is masked) with masked modalities summed over the grid.
pub fn oracle_probability(
    circuit: &Circuit,
    weights: &WeightAssignment,
    x: &[Vec<f64>],
    y: Option<usize>,
    mask: &MarginalMask,
) -> f64 {
    let dims = circuit.leaf_dims();
    let masked: Vec<usize> = (0..dims.len()).filter(|m| mask.is_marginalized(*m)).collect();
    let n: usize = masked.iter().map(|&m| dims[m]).sum();
    let cell = GRID_STEP.powi(n as i32);
    let classes: Vec<usize> = match (mask.target_marginalized, y) {
        (true, _) => (0..circuit.num_classes()).collect(),
        (false, Some(y)) => vec![y],
        (false, None) => panic!("target needed"),
    };
    let mut total = 0.0;
    for assignment in grid_assignments(n) {
        let mut full = x.to_vec();
        let mut it = assignment.iter();
        for &m in &masked {
            full[m] = (0..dims[m]).map(|_| *it.next().unwrap()).collect();
        }
        for &c in &classes {
            total += naive_density(circuit, weights, &full, c) * cell;
        }
    }
    total
}

/// Evidence with every coordinate on the grid.
pub fn grid_evidence(rng: &mut ChaCha8Rng, dims: &[usize]) -> Vec<Vec<f64>> {
    let g = grid();
    dims.iter()
        .map(|&d| (0..d).map(|_| g[rng.random_range(0..GRID_POINTS)]).collect())
        .collect()
}

/// Every subset of modalities, each as a mask, with and without the target.
pub fn all_masks(m_count: usize) -> Vec<MarginalMask> {
    let mut out = Vec::new();
    for bits in 0..(1usize << m_count) {
        let mask = MarginalMask::modalities((0..m_count).filter(|m| bits >> m & 1 == 1));
        out.push(mask.clone());
        out.push(mask.with_target_marginalized());
    }
    out
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `max |a_i - b_i|`.
pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Outcome of comparing the evaluator with the grid oracle.
#[derive(Debug)]
pub struct OracleComparison {
    pub circuits: usize,
    pub queries: usize,
    pub max_log_error: f64,
}

/// Largest number of grid-enumerated coordinates per query (20^3 points).
pub const MAX_ENUMERATED_DIMS: usize = 3;

/// Compares every joint, marginal and conditional query whose masked
/// modalities span at most [`MAX_ENUMERATED_DIMS`] coordinates, on
/// `num_circuits` random circuits with two grid evidence draws each.
pub fn compare_with_oracle(num_circuits: usize, seed: u64) -> OracleComparison {
    let mut r = rng(seed);
    let mut queries = 0;
    let mut max_err: f64 = 0.0;
    for _ in 0..num_circuits {
        let RandomCircuit { circuit, weights } = random_circuit(&mut r);
        let dims = circuit.leaf_dims().to_vec();
        let k = circuit.num_classes();
        for _ in 0..2 {
            let x = grid_evidence(&mut r, &dims);
            for mask in all_masks(dims.len()) {
                let enumerated: usize = (0..dims.len())
                    .filter(|&m| mask.is_marginalized(m))
                    .map(|m| dims[m])
                    .sum();
                if enumerated > MAX_ENUMERATED_DIMS {
                    continue;
                }
                if mask.target_marginalized {
                    let got = circuit
                        .log_evaluate(&weights, &c2mf::circuit::Evidence::new(x.clone()), &mask)
                        .unwrap();
                    let want = oracle_probability(&circuit, &weights, &x, None, &mask).ln();
                    max_err = max_err.max((got - want).abs());
                    queries += 1;
                    continue;
                }
                let mut joint = Vec::with_capacity(k);
                for y in 0..k {
                    let ev = c2mf::circuit::Evidence::new(x.clone()).with_target(y);
                    let got = circuit.log_evaluate(&weights, &ev, &mask).unwrap();
                    let p = oracle_probability(&circuit, &weights, &x, Some(y), &mask);
                    max_err = max_err.max((got - p.ln()).abs());
                    joint.push(p);
                    queries += 1;
                }
                let total: f64 = joint.iter().sum();
                let post = circuit.posterior_over_target(&weights, &x, &mask).unwrap();
                for (q, p) in post.probs().iter().zip(&joint) {
                    max_err = max_err.max((q.ln() - (p / total).ln()).abs());
                }
                queries += 1;
            }
        }
    }
    OracleComparison {
        circuits: num_circuits,
        queries,
        max_log_error: max_err,
    }
}

/// A random point of the `k`-simplex. About one draw in five has a zero
/// entry, exercising the flooring inside the divergence.
pub fn random_simplex(rng: &mut ChaCha8Rng, k: usize) -> c2mf::PredictiveDistribution {
    let mut v: Vec<f64> = (0..k).map(|_| -rng.random::<f64>().max(1e-300).ln()).collect();
    if rng.random_bool(0.2) {
        v[rng.random_range(0..k)] = 0.0;
    }
    let total: f64 = v.iter().sum();
    if total == 0.0 {
        return c2mf::PredictiveDistribution::uniform(k);
    }
    c2mf::PredictiveDistribution::new(v.iter().map(|x| x / total).collect()).unwrap()
}

#[derive(Debug)]
pub struct KlStats {
    pub pairs: usize,
    pub min_kl: f64,
    pub max_self_kl: f64,
}

/// `KL(p || q)` and `KL(p || p)` over `pairs` random simplex pairs with
/// `K` between 2 and 12.
pub fn kl_invariants(pairs: usize, seed: u64) -> KlStats {
    let mut r = rng(seed);
    let mut min_kl = f64::INFINITY;
    let mut max_self: f64 = 0.0;
    for _ in 0..pairs {
        let k = r.random_range(2..=12);
        let p = random_simplex(&mut r, k);
        let q = random_simplex(&mut r, k);
        min_kl = min_kl.min(c2mf::fusion::kl_divergence(&p, &q).unwrap());
        max_self = max_self.max(c2mf::fusion::kl_divergence(&p, &p).unwrap().abs());
    }
    KlStats {
        pairs,
        min_kl,
        max_self_kl: max_self,
    }
}

/// A random fusion circuit: `M` modalities of `K` leaf inputs each, as the
/// fusion layer uses them.
pub fn random_fusion_circuit(rng: &mut ChaCha8Rng) -> (RandomCircuit, usize, usize) {
    let m_count = rng.random_range(2..=3);
    let k = rng.random_range(2..=5);
    let structure = StructureConfig {
        depth: rng.random_range(1..=2),
        num_sums: rng.random_range(1..=3),
        num_repetitions: rng.random_range(1..=2),
    };
    let mut circuit = build_random_tensorized(&vec![k; m_count], k, &structure, rng.random()).unwrap();
    let leaves = circuit.leaf_params().unwrap();
    let g = leaves.gaussian_means.len();
    let c = leaves.categorical_logits.rows();
    let params = LeafParams {
        gaussian_means: (0..g).map(|_| rng.random_range(-8.0..=0.0)).collect(),
        gaussian_log_stds: (0..g).map(|_| rng.random_range(-1.0..=1.5)).collect(),
        categorical_logits: Tensor::from_vec(c, k, (0..c * k).map(|_| rng.random_range(-2.0..2.0)).collect()),
    };
    circuit.set_leaf_params(&params).unwrap();
    let arities = circuit.slot_arities().unwrap();
    let logits: Vec<Vec<f64>> = arities
        .iter()
        .map(|&a| (0..a).map(|_| rng.random_range(-2.0..2.0)).collect())
        .collect();
    (
        RandomCircuit {
            circuit,
            weights: WeightAssignment::from_logits(&logits),
        },
        m_count,
        k,
    )
}

/// Largest `|sum_m relative_csic_m - 1|` over `draws` random circuits, each
/// queried with one random set of unimodal predictions.
pub fn relative_csic_deviation(draws: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..draws {
        let (rc, m_count, k) = random_fusion_circuit(&mut r);
        let preds: Vec<_> = (0..m_count).map(|_| random_simplex(&mut r, k)).collect();
        let report = c2mf::fusion::compute_csic(&rc.circuit, &rc.weights, &preds).unwrap();
        assert!(report.csic.iter().all(|c| *c >= 0.0 && c.is_finite()));
        let total: f64 = report.relative_csic.iter().sum();
        worst = worst.max((total - 1.0).abs());
    }
    worst
}

/// `n` random instances for a model with the given input dims.
pub fn random_features(rng: &mut ChaCha8Rng, dims: &[usize], n: usize, scale: f64) -> Vec<Tensor> {
    dims.iter()
        .map(|&d| Tensor::from_vec(n, d, (0..n * d).map(|_| rng.random_range(-scale..scale)).collect()))
        .collect()
}

/// Builds a C2DPC model with zeroed hypernetwork input weights and a DPC
/// model whose static logits are that (now constant) hypernetwork output,
/// with every other parameter shared. Returns the largest absolute
/// difference over fused posteriors, marginal posteriors, CSIC and relative
/// CSIC on `n` random instances.
pub fn static_reduction_gap(n: usize, seed: u64) -> f64 {
    use c2mf::{FusionMethod, FusionModel, ModelConfig};
    let dims = vec![8, 8];
    let k = 10;
    let mut conditional = FusionModel::new(ModelConfig::new(dims.clone(), k, FusionMethod::C2dpc, seed)).unwrap();
    let mut fixed = FusionModel::new(ModelConfig::new(dims.clone(), k, FusionMethod::Dpc, seed)).unwrap();

    // Move the shared parameters away from their initial values so the
    // comparison does not rely on both models drawing the same init.
    let mut r = rng(seed ^ 0x5eed);
    for id in conditional.all_param_ids() {
        let t = conditional.store_mut().value_mut(id);
        for v in t.data_mut() {
            *v += r.random_range(-0.3..0.3);
        }
    }
    let hyper = conditional.hypernet().unwrap().clone();
    hyper.zero_input_weights(conditional.store_mut());
    for id in fixed.all_param_ids() {
        let name = fixed.store().name(id).to_string();
        if let Some(src) = conditional.store().find(&name) {
            *fixed.store_mut().value_mut(id) = conditional.store().value(src).clone();
        }
    }
    let context_dim = *conditional.config().aggregator_widths.last().unwrap();
    let probe: Vec<f64> = (0..context_dim).map(|_| r.random_range(-5.0..5.0)).collect();
    let logits = hyper.logits(conditional.store(), &probe).unwrap();
    let static_id = fixed.static_weights().unwrap().param_id();
    fixed.store_mut().value_mut(static_id).data_mut().copy_from_slice(&logits);

    let features = random_features(&mut r, &dims, n, 4.0);
    let a = conditional.predict(&features).unwrap();
    let b = fixed.predict(&features).unwrap();
    let mut worst: f64 = 0.0;
    for (x, y) in a.iter().zip(&b) {
        worst = worst.max(max_abs_diff(x.fused.probs(), y.fused.probs()));
        worst = worst.max(max_abs_diff(&x.credibility.csic, &y.credibility.csic));
        worst = worst.max(max_abs_diff(&x.credibility.relative_csic, &y.credibility.relative_csic));
        for (p, q) in x.credibility.marginal_posteriors.iter().zip(&y.credibility.marginal_posteriors) {
            worst = worst.max(max_abs_diff(p.probs(), q.probs()));
        }
    }
    worst
}

#[derive(Debug)]
pub struct Census {
    /// (modality, class) cells checked.
    pub cells: usize,
    pub count_mismatches: usize,
    pub donor_violations: usize,
    pub corrupted: usize,
}

/// Corrupts a clean split with `spec` at `lambda` (given as the exact
/// fraction `num / den`) and recounts every (modality, class) cell with
/// integer arithmetic.
pub fn conflict_census(
    clean: &c2mf::ConflictDataset,
    spec: &c2mf::ConflictSpec,
    num: usize,
    den: usize,
) -> Census {
    use c2mf::benchmark::{apply_conflict, SplitStream};
    use c2mf::Provenance;
    let lambda = num as f64 / den as f64;
    let out = apply_conflict(clean, spec, lambda, SplitStream::Train).unwrap();
    let mut n_c = vec![0usize; clean.num_classes];
    for inst in &clean.instances {
        n_c[inst.label] += 1;
    }
    let m_count = clean.dims.len();
    let mut counts = vec![vec![0usize; clean.num_classes]; m_count];
    let mut donor_violations = 0;
    for (before, after) in clean.instances.iter().zip(&out.instances) {
        assert_eq!(before.label, after.label);
        match after.provenance {
            Provenance::Clean => assert_eq!(before.features, after.features),
            Provenance::Corrupted {
                modality,
                source_class,
                donor_class,
            } => {
                assert_eq!(source_class, after.label);
                counts[modality][source_class] += 1;
                if spec.class_sets[modality].contains(&donor_class) {
                    donor_violations += 1;
                }
                for m in 0..m_count {
                    if m != modality {
                        assert_eq!(before.features[m], after.features[m]);
                    }
                }
            }
        }
    }
    let mut cells = 0;
    let mut mismatches = 0;
    for (m, set) in spec.class_sets.iter().enumerate() {
        for c in 0..clean.num_classes {
            let want = if set.contains(&c) { num * n_c[c] / den } else { 0 };
            cells += 1;
            if counts[m][c] != want {
                mismatches += 1;
            }
        }
    }
    Census {
        cells,
        count_mismatches: mismatches,
        donor_violations,
        corrupted: out.num_corrupted(),
    }
}
