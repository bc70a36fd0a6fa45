use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{BenchmarkError, ConflictDataset, DatasetSplits, Provenance};

/// How the donor class `c'` of a corrupted instance is chosen.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DonorPolicy {
    /// Uniform over the classes outside `c_m`, drawn per corrupted instance.
    #[default]
    Uniform,
    /// A fixed donor class for each corrupted class: `fixed[m]` lists
    /// `[class, donor]` pairs covering exactly the classes of `c_m`.
    Fixed(Vec<Vec<[usize; 2]>>),
}

/// Which classes of which modality get corrupted, and how often.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConflictSpec {
    /// `class_sets[m]` is the set `c_m` of classes whose modality-`m`
    /// features are replaced. Sets of different modalities must be disjoint,
    /// so that every instance has at most one corrupted modality.
    pub class_sets: Vec<Vec<usize>>,
    pub lambda_train: f64,
    pub lambda_test: f64,
    #[serde(default)]
    pub donors: DonorPolicy,
    pub seed: u64,
}

/// Random stream used for each split, so the splits are corrupted
/// independently from one seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitStream {
    Train = 0,
    Validation = 1,
    Test = 2,
}

/// `floor(lambda * n)`. The small slack keeps products such as `0.7 * 30`,
/// which round to just below an integer, from losing one instance.
pub(crate) fn corrupted_count(lambda: f64, n: usize) -> usize {
    ((lambda * n as f64 + 1e-9).floor() as usize).min(n)
}

impl ConflictSpec {
    pub fn check(&self, num_classes: usize, num_modalities: usize) -> Result<(), BenchmarkError> {
        let bad = |msg: String| Err(BenchmarkError::InvalidConflict(msg));
        if self.class_sets.len() != num_modalities {
            return bad(format!(
                "{} class sets for {num_modalities} modalities",
                self.class_sets.len()
            ));
        }
        for (name, l) in [("lambda_train", self.lambda_train), ("lambda_test", self.lambda_test)] {
            if !(0.0..=1.0).contains(&l) {
                return bad(format!("{name} = {l} is outside [0, 1]"));
            }
        }
        let mut owner = vec![None; num_classes];
        for (m, set) in self.class_sets.iter().enumerate() {
            for &c in set {
                if c >= num_classes {
                    return bad(format!("class {c} of modality {m} is out of range"));
                }
                if let Some(prev) = owner[c] {
                    return bad(format!(
                        "class {c} appears in the sets of modalities {prev} and {m}"
                    ));
                }
                owner[c] = Some(m);
            }
            if set.len() == num_classes {
                return bad(format!("modality {m} corrupts every class, leaving no donors"));
            }
        }
        if let DonorPolicy::Fixed(map) = &self.donors {
            if map.len() != num_modalities {
                return bad("fixed donors need one list per modality".into());
            }
            for (m, (pairs, set)) in map.iter().zip(&self.class_sets).enumerate() {
                let mut sources: Vec<usize> = pairs.iter().map(|p| p[0]).collect();
                let mut expected = set.clone();
                sources.sort_unstable();
                expected.sort_unstable();
                if sources != expected {
                    return bad(format!("fixed donors of modality {m} must cover exactly its class set"));
                }
                for &[c, d] in pairs {
                    if d >= num_classes || set.contains(&d) {
                        return bad(format!(
                            "donor {d} for class {c} of modality {m} must be a valid class outside the set"
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Replaces modality features of `floor(lambda * n_c)` clean instances of
/// every class `c` in each `c_m` with the features of a donor instance of a
/// class outside `c_m`, drawn from the same (uncorrupted) dataset.
///
/// Every clean candidate of a class gets a donor drawn in a seeded shuffled
/// order and only the first `floor(lambda * n_c)` are applied, so the
/// corrupted set for a smaller `lambda` is a subset of that for a larger one.
pub fn apply_conflict(
    dataset: &ConflictDataset,
    spec: &ConflictSpec,
    lambda: f64,
    stream: SplitStream,
) -> Result<ConflictDataset, BenchmarkError> {
    spec.check(dataset.num_classes, dataset.num_modalities())?;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(BenchmarkError::InvalidConflict(format!("lambda = {lambda} is outside [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream as u64);

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes];
    for (i, inst) in dataset.instances.iter().enumerate() {
        by_class[inst.label].push(i);
    }
    let mut out = dataset.clone();
    for (m, set) in spec.class_sets.iter().enumerate() {
        let pool: Vec<usize> = (0..dataset.num_classes)
            .filter(|c| !set.contains(c) && !by_class[*c].is_empty())
            .collect();
        for &c in set {
            let mut candidates: Vec<usize> = by_class[c]
                .iter()
                .copied()
                .filter(|&i| out.instances[i].provenance == Provenance::Clean)
                .collect();
            let k = corrupted_count(lambda, candidates.len());
            candidates.shuffle(&mut rng);
            let fixed = match &spec.donors {
                DonorPolicy::Uniform => None,
                DonorPolicy::Fixed(map) => map[m].iter().find(|p| p[0] == c).map(|p| p[1]),
            };
            let donor_pool_empty = match fixed {
                Some(d) => by_class[d].is_empty(),
                None => pool.is_empty(),
            };
            if donor_pool_empty {
                if k > 0 {
                    return Err(BenchmarkError::EmptyDonorPool { modality: m, class: c });
                }
                continue;
            }
            for (j, &i) in candidates.iter().enumerate() {
                let donor_class = fixed.unwrap_or_else(|| pool[rng.random_range(0..pool.len())]);
                let donors = &by_class[donor_class];
                let donor = donors[rng.random_range(0..donors.len())];
                if j < k {
                    let inst = &mut out.instances[i];
                    inst.features[m] = dataset.instances[donor].features[m].clone();
                    inst.provenance = Provenance::Corrupted {
                        modality: m,
                        source_class: c,
                        donor_class,
                    };
                }
            }
        }
    }
    Ok(out)
}

/// Corrupts train and validation at `lambda_train` and test at `lambda_test`.
pub fn corrupt_splits(splits: &DatasetSplits, spec: &ConflictSpec) -> Result<DatasetSplits, BenchmarkError> {
    Ok(DatasetSplits {
        train: apply_conflict(&splits.train, spec, spec.lambda_train, SplitStream::Train)?,
        validation: apply_conflict(&splits.validation, spec, spec.lambda_train, SplitStream::Validation)?,
        test: apply_conflict(&splits.test, spec, spec.lambda_test, SplitStream::Test)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchmark::Instance;

    /// Class `c` instances carry the constant feature `c` in both modalities.
    fn labelled(counts: &[usize]) -> ConflictDataset {
        let mut ds = ConflictDataset::new(counts.len(), vec![1, 1]);
        for (c, &n) in counts.iter().enumerate() {
            for _ in 0..n {
                ds.instances.push(Instance {
                    features: vec![vec![c as f64], vec![c as f64]],
                    label: c,
                    provenance: Provenance::Clean,
                });
            }
        }
        ds
    }

    fn spec(sets: Vec<Vec<usize>>) -> ConflictSpec {
        ConflictSpec {
            class_sets: sets,
            lambda_train: 0.7,
            lambda_test: 1.0,
            donors: DonorPolicy::Uniform,
            seed: 3,
        }
    }

    #[test]
    fn lambda_zero_is_identity() {
        let ds = labelled(&[5, 5, 5]);
        let out = apply_conflict(&ds, &spec(vec![vec![0], vec![1]]), 0.0, SplitStream::Train).unwrap();
        assert_eq!(out, ds);
    }

    #[test]
    fn lambda_one_corrupts_whole_class() {
        let ds = labelled(&[10, 4, 4]);
        let out = apply_conflict(&ds, &spec(vec![vec![0], vec![]]), 1.0, SplitStream::Train).unwrap();
        let hit: Vec<_> = out.instances.iter().filter(|i| i.provenance != Provenance::Clean).collect();
        assert_eq!(hit.len(), 10);
        for i in hit {
            assert_eq!(i.label, 0);
            assert_ne!(i.features[0][0], 0.0, "donor features come from another class");
            assert_eq!(i.features[1][0], 0.0, "other modality untouched");
        }
    }

    #[test]
    fn smaller_lambda_corrupts_a_subset() {
        let ds = labelled(&[20, 20, 20, 20]);
        let s = spec(vec![vec![0, 1], vec![2]]);
        let half = apply_conflict(&ds, &s, 0.5, SplitStream::Test).unwrap();
        let full = apply_conflict(&ds, &s, 1.0, SplitStream::Test).unwrap();
        for (h, f) in half.instances.iter().zip(&full.instances) {
            if h.provenance != Provenance::Clean {
                assert_eq!(h, f);
            }
        }
    }

    #[test]
    fn fixed_donors_are_respected() {
        let ds = labelled(&[6, 6, 6, 6]);
        let mut s = spec(vec![vec![0], vec![1]]);
        s.donors = DonorPolicy::Fixed(vec![vec![[0, 2]], vec![[1, 3]]]);
        let out = apply_conflict(&ds, &s, 1.0, SplitStream::Train).unwrap();
        for i in &out.instances {
            match i.provenance {
                Provenance::Corrupted { modality: 0, donor_class, .. } => assert_eq!(donor_class, 2),
                Provenance::Corrupted { modality: 1, donor_class, .. } => assert_eq!(donor_class, 3),
                _ => {}
            }
        }
    }

    #[test]
    fn rejects_invalid_specs() {
        let ds = labelled(&[3, 3, 3]);
        let cases = [
            spec(vec![vec![0]]),
            spec(vec![vec![0], vec![0]]),
            spec(vec![vec![7], vec![]]),
            spec(vec![vec![0, 1, 2], vec![]]),
        ];
        for s in cases {
            assert!(apply_conflict(&ds, &s, 0.5, SplitStream::Train).is_err(), "{s:?}");
        }
        let mut s = spec(vec![vec![0], vec![1]]);
        s.donors = DonorPolicy::Fixed(vec![vec![[0, 0]], vec![[1, 2]]]);
        assert!(apply_conflict(&ds, &s, 0.5, SplitStream::Train).is_err());
        let empty_donor = labelled(&[3, 0, 0]);
        assert_eq!(
            apply_conflict(&empty_donor, &spec(vec![vec![0], vec![]]), 1.0, SplitStream::Train),
            Err(BenchmarkError::EmptyDonorPool { modality: 0, class: 0 })
        );
    }
}
