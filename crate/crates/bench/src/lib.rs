//! Shared fixtures for the benchmarks in `benches/`.

use c2mf::benchmark::generate_synthetic;
use c2mf::{Batch, FusionMethod, FusionModel, ModelConfig, SyntheticSpec};

/// A batch of `n` instances from the ten-class, two-modality benchmark shape.
pub fn batch(n: usize) -> Batch {
    generate_synthetic(&SyntheticSpec {
        num_classes: 10,
        dims: vec![8, 8],
        class_means: None,
        mean_scale: 3.0,
        noise_std: vec![1.0, 1.0],
        train_size: n,
        validation_size: 0,
        test_size: 0,
        seed: 0,
    })
    .expect("valid spec")
    .full_batch()
}

/// A freshly initialized model of the default architecture for that shape.
pub fn model(method: FusionMethod) -> FusionModel {
    FusionModel::new(ModelConfig::new(vec![8, 8], 10, method, 0)).expect("valid config")
}
