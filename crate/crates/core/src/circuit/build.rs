use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Circuit, CircuitError, CircuitNode, LeafDistribution, VariableId};

/// Shape of a randomized tensorized circuit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct StructureConfig {
    /// Region-graph depth per modality; 1 means each modality is a single
    /// factorized leaf region.
    pub depth: usize,
    /// Sum nodes per internal region and distributions per leaf region.
    pub num_sums: usize,
    /// Independent random partitions mixed at the root.
    pub num_repetitions: usize,
}

impl Default for StructureConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            num_sums: 4,
            num_repetitions: 2,
        }
    }
}

struct Builder {
    nodes: Vec<CircuitNode>,
    next_slot: usize,
    rng: ChaCha8Rng,
}

impl Builder {
    fn push(&mut self, node: CircuitNode) -> usize {
        self.nodes.push(node);
        self.nodes.len() - 1
    }

    fn sum(&mut self, children: Vec<usize>) -> usize {
        let weight_slot = self.next_slot;
        self.next_slot += 1;
        self.push(CircuitNode::Sum {
            children,
            weight_slot,
        })
    }

    fn gaussian(&mut self, modality: usize, dim: usize) -> usize {
        let mean: f64 = self.rng.sample(StandardNormal);
        self.push(CircuitNode::Leaf {
            var: VariableId::Modality {
                index: modality,
                dim,
            },
            dist: LeafDistribution::Gaussian { mean, log_std: 0.0 },
        })
    }

    /// `num_sums` factorized distributions over `dims`.
    fn leaf_region(&mut self, modality: usize, dims: &[usize], num_sums: usize) -> Vec<usize> {
        (0..num_sums)
            .map(|_| {
                let leaves: Vec<usize> = dims.iter().map(|&d| self.gaussian(modality, d)).collect();
                if leaves.len() == 1 {
                    leaves[0]
                } else {
                    self.push(CircuitNode::Product { children: leaves })
                }
            })
            .collect()
    }

    fn region(&mut self, modality: usize, dims: &[usize], level: usize, cfg: &StructureConfig) -> Vec<usize> {
        if level == cfg.depth {
            return self.leaf_region(modality, dims, cfg.num_sums);
        }
        let (left, right) = dims.split_at(dims.len() / 2);
        let a = self.region(modality, left, level + 1, cfg);
        let b = self.region(modality, right, level + 1, cfg);
        let mut products = Vec::with_capacity(a.len() * b.len());
        for &x in &a {
            for &y in &b {
                products.push(self.push(CircuitNode::Product {
                    children: vec![x, y],
                }));
            }
        }
        (0..cfg.num_sums).map(|_| self.sum(products.clone())).collect()
    }
}

/// Builds a smooth, decomposable circuit over `leaf_dims` modalities and a
/// `num_classes`-valued target.
///
/// Each repetition randomly permutes the dims of every modality and splits
/// them in halves down to `depth` levels. The root is a single sum over, for
/// every repetition, the products of one output per modality region with one
/// of `num_classes` categorical target leaves. Gaussian means start at
/// standard-normal draws with unit scale; target leaves start uniform.
pub fn build_random_tensorized(
    leaf_dims: &[usize],
    num_classes: usize,
    config: &StructureConfig,
    seed: u64,
) -> Result<Circuit, CircuitError> {
    if config.depth == 0 || config.num_sums == 0 || config.num_repetitions == 0 {
        return Err(CircuitError::InvalidArgument(
            "depth, num_sums and num_repetitions must all be at least 1".into(),
        ));
    }
    if num_classes < 2 {
        return Err(CircuitError::InvalidArgument(
            "the target needs at least 2 classes".into(),
        ));
    }
    if leaf_dims.is_empty() {
        return Err(CircuitError::InvalidArgument(
            "at least one modality is required".into(),
        ));
    }
    let needed = 1usize
        .checked_shl((config.depth - 1) as u32)
        .filter(|n| *n > 0)
        .unwrap_or(usize::MAX);
    for (modality, &dims) in leaf_dims.iter().enumerate() {
        if dims < needed {
            return Err(CircuitError::DepthTooLarge {
                depth: config.depth,
                modality,
                dims,
                needed,
            });
        }
    }

    let mut b = Builder {
        nodes: Vec::new(),
        next_slot: 0,
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let mut root_children = Vec::new();
    for _ in 0..config.num_repetitions {
        let mut outputs: Vec<Vec<usize>> = Vec::with_capacity(leaf_dims.len());
        for (m, &d) in leaf_dims.iter().enumerate() {
            let mut dims: Vec<usize> = (0..d).collect();
            dims.shuffle(&mut b.rng);
            outputs.push(b.region(m, &dims, 1, config));
        }
        let targets: Vec<usize> = (0..num_classes)
            .map(|_| {
                b.push(CircuitNode::Leaf {
                    var: VariableId::Target,
                    dist: LeafDistribution::Categorical {
                        logits: vec![0.0; num_classes],
                    },
                })
            })
            .collect();

        // Cartesian product over modality outputs, then over target leaves.
        let mut combos: Vec<Vec<usize>> = vec![Vec::new()];
        for outs in &outputs {
            combos = combos
                .into_iter()
                .flat_map(|c| {
                    outs.iter().map(move |&o| {
                        let mut c = c.clone();
                        c.push(o);
                        c
                    })
                })
                .collect();
        }
        for combo in &combos {
            for &t in &targets {
                let mut children = combo.clone();
                children.push(t);
                root_children.push(b.push(CircuitNode::Product { children }));
            }
        }
    }
    let root = b.sum(root_children);
    Ok(Circuit::new(num_classes, leaf_dims.to_vec(), b.nodes, root))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuit::validate;

    #[test]
    fn built_circuits_are_valid() {
        for depth in 1..=3 {
            let c = build_random_tensorized(&[4, 5], 3, &StructureConfig { depth, num_sums: 2, num_repetitions: 2 }, 7)
                .unwrap();
            assert!(validate(&c).is_ok(), "depth {depth}: {}", validate(&c));
        }
    }

    #[test]
    fn same_seed_same_circuit() {
        let cfg = StructureConfig::default();
        let a = build_random_tensorized(&[4, 4], 3, &cfg, 1).unwrap();
        let b = build_random_tensorized(&[4, 4], 3, &cfg, 1).unwrap();
        let c = build_random_tensorized(&[4, 4], 3, &cfg, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_unrealizable_depth() {
        let err = build_random_tensorized(&[4, 3], 2, &StructureConfig { depth: 3, num_sums: 2, num_repetitions: 1 }, 0)
            .unwrap_err();
        assert_eq!(
            err,
            CircuitError::DepthTooLarge {
                depth: 3,
                modality: 1,
                dims: 3,
                needed: 4
            }
        );
        assert!(matches!(
            build_random_tensorized(&[4], 2, &StructureConfig { depth: 1, num_sums: 0, num_repetitions: 1 }, 0),
            Err(CircuitError::InvalidArgument(_))
        ));
    }
}
