//! Conflict construction counted from scratch.

mod support;

use c2mf::benchmark::{generate_splits, DonorPolicy};
use c2mf::{ConflictSpec, SyntheticSpec};

fn clean_train(seed: u64) -> c2mf::ConflictDataset {
    let spec = SyntheticSpec {
        num_classes: 10,
        dims: vec![8, 8],
        class_means: None,
        mean_scale: 3.0,
        noise_std: vec![1.0, 1.0],
        train_size: 5_000,
        validation_size: 0,
        test_size: 0,
        seed,
    };
    generate_splits(&spec).unwrap().train
}

fn conflict(donors: DonorPolicy) -> ConflictSpec {
    ConflictSpec {
        class_sets: vec![vec![1, 5, 8], vec![0, 6, 7]],
        lambda_train: 0.7,
        lambda_test: 0.0,
        donors,
        seed: 3,
    }
}

#[test]
fn counts_match_floor_of_lambda_times_class_size() {
    let clean = clean_train(0);
    for (num, den) in [(7, 10), (0, 1), (1, 2), (3, 4), (1, 1), (1, 3)] {
        let census = support::conflict_census(&clean, &conflict(DonorPolicy::Uniform), num, den);
        assert_eq!(census.cells, 20);
        assert_eq!(census.count_mismatches, 0, "lambda {num}/{den}: {census:?}");
        assert_eq!(census.donor_violations, 0, "lambda {num}/{den}: {census:?}");
    }
}

#[test]
fn fixed_donor_policy_passes_the_same_census() {
    let fixed = DonorPolicy::Fixed(vec![vec![[1, 4], [5, 2], [8, 3]], vec![[0, 2], [6, 9], [7, 3]]]);
    let census = support::conflict_census(&clean_train(1), &conflict(fixed), 7, 10);
    assert_eq!(census.count_mismatches, 0, "{census:?}");
    assert_eq!(census.donor_violations, 0, "{census:?}");
    assert!(census.corrupted > 0);
}
