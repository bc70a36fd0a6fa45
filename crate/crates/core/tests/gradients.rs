//! Reverse-mode gradients of the full training loss against central
//! finite differences, for every fusion method and every parameter scalar.

use c2mf::benchmark::generate_synthetic;
use c2mf::training::gradient_check;
use c2mf::{FusionMethod, FusionModel, ModelConfig, SyntheticSpec};

fn batch() -> c2mf::Batch {
    let spec = SyntheticSpec {
        num_classes: 3,
        dims: vec![4, 3],
        class_means: None,
        mean_scale: 1.0,
        noise_std: vec![1.0, 1.0],
        train_size: 4,
        validation_size: 0,
        test_size: 0,
        seed: 11,
    };
    generate_synthetic(&spec).unwrap().full_batch()
}

fn check(method: FusionMethod) {
    let cfg = ModelConfig::new(vec![4, 3], 3, method, 5);
    let model = FusionModel::new(cfg).unwrap();
    let report = gradient_check(&model, &batch(), 1.0, None, None, 0).unwrap();
    assert!(report.loss.is_finite());
    for g in &report.groups {
        assert_eq!(g.checked, g.total);
        assert!(
            g.max_relative_error < 1e-4,
            "{method}: {} worst {:?} err {}",
            g.name,
            g.worst,
            g.max_relative_error
        );
    }
}

#[test]
fn dpc_gradients_match_finite_differences() {
    check(FusionMethod::Dpc);
}

#[test]
fn c2dpc_gradients_match_finite_differences() {
    check(FusionMethod::C2dpc);
}

#[test]
fn cwm_gradients_match_finite_differences() {
    check(FusionMethod::Cwm);
}

#[test]
fn c2wm_gradients_match_finite_differences() {
    check(FusionMethod::C2wm);
}
