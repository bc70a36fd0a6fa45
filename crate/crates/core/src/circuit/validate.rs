use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{Circuit, CircuitNode, LeafDistribution, VariableId};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    Empty,
    RootOutOfRange,
    DanglingChild { child: usize },
    NotTopological { child: usize },
    Cycle,
    NoChildren,
    NonSmoothSum,
    NonDecomposableProduct,
    IncompleteRootScope,
    InvalidVariable,
    InvalidLeafParameters,
    DuplicateWeightSlot { slot: usize },
    WeightSlotGap { slot: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub node: usize,
    pub kind: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let n = self.node;
        match &self.kind {
            ViolationKind::Empty => write!(f, "circuit has no nodes"),
            ViolationKind::RootOutOfRange => write!(f, "root index {n} out of range"),
            ViolationKind::DanglingChild { child } => {
                write!(f, "node {n} references missing child {child}")
            }
            ViolationKind::NotTopological { child } => {
                write!(f, "node {n} precedes its child {child} (not topologically ordered)")
            }
            ViolationKind::Cycle => write!(f, "cycle through node {n}"),
            ViolationKind::NoChildren => write!(f, "internal node {n} has no children"),
            ViolationKind::NonSmoothSum => write!(f, "non-smooth sum at node {n}"),
            ViolationKind::NonDecomposableProduct => {
                write!(f, "non-decomposable product at node {n}")
            }
            ViolationKind::IncompleteRootScope => {
                write!(f, "root {n} does not cover every variable")
            }
            ViolationKind::InvalidVariable => write!(f, "leaf {n} has an invalid variable"),
            ViolationKind::InvalidLeafParameters => {
                write!(f, "leaf {n} has invalid distribution parameters")
            }
            ViolationKind::DuplicateWeightSlot { slot } => {
                write!(f, "sum node {n} reuses weight slot {slot}")
            }
            ViolationKind::WeightSlotGap { slot } => {
                write!(f, "weight slot {slot} is not used by any sum node")
            }
        }
    }
}

/// Result of [`validate`]; empty means the circuit is well formed.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, node: usize, kind: ViolationKind) {
        self.violations.push(Violation { node, kind });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return write!(f, "ok");
        }
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                write!(f, "; ")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

/// Checks ordering, acyclicity, arities, smoothness, decomposability, root
/// scope, leaf variables/parameters and weight-slot registration.
///
/// Violations are reported, not raised.
pub fn validate(circuit: &Circuit) -> ValidationReport {
    let mut report = ValidationReport::default();
    let nodes = circuit.nodes();
    let n = nodes.len();
    if n == 0 {
        report.push(0, ViolationKind::Empty);
        return report;
    }
    if circuit.root() >= n {
        report.push(circuit.root(), ViolationKind::RootOutOfRange);
    }

    let mut ordered = true;
    for (i, node) in nodes.iter().enumerate() {
        if !matches!(node, CircuitNode::Leaf { .. }) && node.children().is_empty() {
            report.push(i, ViolationKind::NoChildren);
        }
        for &c in node.children() {
            if c >= n {
                report.push(i, ViolationKind::DanglingChild { child: c });
                ordered = false;
            } else if c >= i {
                report.push(i, ViolationKind::NotTopological { child: c });
                ordered = false;
            }
        }
    }
    if !ordered {
        for node in find_cycles(circuit) {
            report.push(node, ViolationKind::Cycle);
        }
    }

    for (i, node) in nodes.iter().enumerate() {
        if let CircuitNode::Leaf { var, dist } = node {
            check_leaf(circuit, i, var, dist, &mut report);
        }
    }

    let mut slots: Vec<Option<usize>> = Vec::new();
    for (i, node) in nodes.iter().enumerate() {
        if let CircuitNode::Sum { weight_slot, .. } = node {
            if *weight_slot >= slots.len() {
                slots.resize(weight_slot + 1, None);
            }
            if slots[*weight_slot].is_some() {
                report.push(i, ViolationKind::DuplicateWeightSlot { slot: *weight_slot });
            } else {
                slots[*weight_slot] = Some(i);
            }
        }
    }
    for (slot, owner) in slots.iter().enumerate() {
        if owner.is_none() {
            report.push(0, ViolationKind::WeightSlotGap { slot });
        }
    }

    // Scope checks need a well-ordered DAG.
    if ordered && circuit.root() < n {
        let scopes = scopes(circuit);
        for (i, node) in nodes.iter().enumerate() {
            match node {
                CircuitNode::Sum { children, .. } if !children.is_empty() => {
                    let first = &scopes[children[0]];
                    if children.iter().any(|&c| scopes[c] != *first) {
                        report.push(i, ViolationKind::NonSmoothSum);
                    }
                }
                CircuitNode::Product { children } => {
                    let mut seen = BTreeSet::new();
                    let disjoint = children
                        .iter()
                        .all(|&c| scopes[c].iter().all(|v| seen.insert(*v)));
                    if !disjoint {
                        report.push(i, ViolationKind::NonDecomposableProduct);
                    }
                }
                _ => {}
            }
        }
        let full: BTreeSet<VariableId> = circuit.variables().into_iter().collect();
        if scopes[circuit.root()] != full {
            report.push(circuit.root(), ViolationKind::IncompleteRootScope);
        }
    }
    report
}

fn check_leaf(
    circuit: &Circuit,
    i: usize,
    var: &VariableId,
    dist: &LeafDistribution,
    report: &mut ValidationReport,
) {
    let var_ok = match var {
        VariableId::Modality { index, dim } => {
            *index < circuit.num_modalities() && *dim < circuit.leaf_dims()[*index]
        }
        VariableId::Target => true,
    };
    let kind_ok = matches!(
        (var, dist),
        (VariableId::Target, LeafDistribution::Categorical { .. })
            | (VariableId::Modality { .. }, LeafDistribution::Gaussian { .. })
    );
    if !var_ok || !kind_ok {
        report.push(i, ViolationKind::InvalidVariable);
        return;
    }
    let params_ok = match dist {
        LeafDistribution::Gaussian { mean, log_std } => mean.is_finite() && log_std.is_finite(),
        LeafDistribution::Categorical { logits } => {
            logits.len() == circuit.num_classes()
                && logits.iter().all(|l| !l.is_nan() && *l != f64::INFINITY)
                && logits.iter().any(|l| l.is_finite())
        }
    };
    if !params_ok {
        report.push(i, ViolationKind::InvalidLeafParameters);
    }
}

/// Variable scope of every node. Assumes children precede parents.
pub(crate) fn scopes(circuit: &Circuit) -> Vec<BTreeSet<VariableId>> {
    let mut out: Vec<BTreeSet<VariableId>> = Vec::with_capacity(circuit.len());
    for node in circuit.nodes() {
        let scope = match node {
            CircuitNode::Leaf { var, .. } => BTreeSet::from([*var]),
            CircuitNode::Product { children } | CircuitNode::Sum { children, .. } => children
                .iter()
                .flat_map(|&c| out[c].iter().copied())
                .collect(),
        };
        out.push(scope);
    }
    out
}

/// Nodes lying on a directed cycle (iterative three-color DFS).
fn find_cycles(circuit: &Circuit) -> Vec<usize> {
    let nodes = circuit.nodes();
    let n = nodes.len();
    let mut color = vec![0u8; n];
    let mut on_cycle = BTreeSet::new();
    for start in 0..n {
        if color[start] != 0 {
            continue;
        }
        let mut stack: Vec<(usize, usize)> = vec![(start, 0)];
        color[start] = 1;
        while let Some(top) = stack.last_mut() {
            let node = top.0;
            let children = nodes[node].children();
            if top.1 < children.len() {
                let c = children[top.1];
                top.1 += 1;
                if c >= n {
                    continue;
                }
                match color[c] {
                    0 => {
                        color[c] = 1;
                        stack.push((c, 0));
                    }
                    1 => {
                        on_cycle.insert(c);
                    }
                    _ => {}
                }
            } else {
                color[node] = 2;
                stack.pop();
            }
        }
    }
    on_cycle.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuit::Circuit;

    fn gauss(m: usize, dim: usize) -> CircuitNode {
        CircuitNode::Leaf {
            var: VariableId::Modality { index: m, dim },
            dist: LeafDistribution::Gaussian {
                mean: 0.0,
                log_std: 0.0,
            },
        }
    }

    fn target(k: usize) -> CircuitNode {
        CircuitNode::Leaf {
            var: VariableId::Target,
            dist: LeafDistribution::Categorical {
                logits: vec![0.0; k],
            },
        }
    }

    #[test]
    fn single_target_leaf_is_valid() {
        let c = Circuit::new(3, vec![], vec![target(3)], 0);
        assert!(validate(&c).is_ok());
    }

    #[test]
    fn detects_non_smooth_sum() {
        let nodes = vec![
            gauss(0, 0),
            gauss(0, 0),
            target(2),
            CircuitNode::Product {
                children: vec![1, 2],
            },
            CircuitNode::Sum {
                children: vec![0, 3],
                weight_slot: 0,
            },
        ];
        let report = validate(&Circuit::new(2, vec![1], nodes, 4));
        assert!(report
            .violations
            .contains(&Violation {
                node: 4,
                kind: ViolationKind::NonSmoothSum
            }));
        assert!(report.to_string().contains("non-smooth sum at node 4"));
    }

    #[test]
    fn detects_non_decomposable_product() {
        let nodes = vec![
            gauss(0, 0),
            gauss(0, 0),
            target(2),
            CircuitNode::Product {
                children: vec![0, 1, 2],
            },
        ];
        let report = validate(&Circuit::new(2, vec![1], nodes, 3));
        assert_eq!(
            report.violations,
            vec![Violation {
                node: 3,
                kind: ViolationKind::NonDecomposableProduct
            }]
        );
        assert!(report.to_string().contains("non-decomposable product at node 3"));
    }

    #[test]
    fn detects_ordering_and_cycles() {
        let nodes = vec![
            CircuitNode::Product { children: vec![1] },
            CircuitNode::Product { children: vec![0] },
            target(2),
        ];
        let report = validate(&Circuit::new(2, vec![], nodes, 1));
        let kinds: Vec<_> = report.violations.iter().map(|v| v.kind.clone()).collect();
        assert!(kinds.contains(&ViolationKind::NotTopological { child: 1 }));
        assert!(kinds.contains(&ViolationKind::Cycle));
    }

    #[test]
    fn detects_incomplete_root_and_slot_problems() {
        let nodes = vec![
            target(2),
            target(2),
            CircuitNode::Sum {
                children: vec![0, 1],
                weight_slot: 1,
            },
            CircuitNode::Sum {
                children: vec![2],
                weight_slot: 1,
            },
        ];
        // declares one modality that no leaf covers
        let report = validate(&Circuit::new(2, vec![1], nodes, 3));
        let kinds: Vec<_> = report.violations.iter().map(|v| v.kind.clone()).collect();
        assert!(kinds.contains(&ViolationKind::IncompleteRootScope));
        assert!(kinds.contains(&ViolationKind::DuplicateWeightSlot { slot: 1 }));
        assert!(kinds.contains(&ViolationKind::WeightSlotGap { slot: 0 }));
    }

    #[test]
    fn detects_bad_leaves() {
        let nodes = vec![
            gauss(1, 0),
            CircuitNode::Leaf {
                var: VariableId::Target,
                dist: LeafDistribution::Categorical {
                    logits: vec![f64::NEG_INFINITY; 2],
                },
            },
            CircuitNode::Product {
                children: vec![0, 1],
            },
        ];
        let report = validate(&Circuit::new(2, vec![1], nodes, 2));
        let kinds: Vec<_> = report.violations.iter().map(|v| (v.node, v.kind.clone())).collect();
        assert!(kinds.contains(&(0, ViolationKind::InvalidVariable)));
        assert!(kinds.contains(&(1, ViolationKind::InvalidLeafParameters)));
    }
}
