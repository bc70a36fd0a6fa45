use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{BenchmarkError, ConflictDataset, DatasetSplits, Instance, Provenance};

/// Class-conditional Gaussian features for every modality.
///
/// Each modality `m` gives class `c` an isotropic Gaussian with mean
/// `class_means[m][c]` and standard deviation `noise_std[m]`. When
/// `class_means` is omitted, every mean coordinate is drawn from
/// `N(0, mean_scale^2)` using the dataset seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub dims: Vec<usize>,
    #[serde(default)]
    pub class_means: Option<Vec<Vec<Vec<f64>>>>,
    #[serde(default = "default_mean_scale")]
    pub mean_scale: f64,
    pub noise_std: Vec<f64>,
    pub train_size: usize,
    pub validation_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

fn default_mean_scale() -> f64 {
    3.0
}

const MEANS_STREAM: u64 = 100;

impl SyntheticSpec {
    fn check(&self) -> Result<(), BenchmarkError> {
        let bad = |msg: String| Err(BenchmarkError::InvalidSynthetic(msg));
        if self.num_classes < 2 {
            return bad("at least two classes are required".into());
        }
        if self.dims.is_empty() || self.dims.contains(&0) {
            return bad("every modality needs a positive dimension".into());
        }
        if self.noise_std.len() != self.dims.len() {
            return bad(format!(
                "{} noise levels for {} modalities",
                self.noise_std.len(),
                self.dims.len()
            ));
        }
        if self.noise_std.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return bad("noise standard deviations must be positive".into());
        }
        if !(self.mean_scale.is_finite() && self.mean_scale >= 0.0) {
            return bad("mean_scale must be finite and nonnegative".into());
        }
        if let Some(means) = &self.class_means {
            if means.len() != self.dims.len()
                || means.iter().zip(&self.dims).any(|(mm, &d)| {
                    mm.len() != self.num_classes || mm.iter().any(|v| v.len() != d)
                })
            {
                return bad("class_means must be [modality][class][dim]".into());
            }
        }
        Ok(())
    }

    /// Resolved class means `[modality][class][dim]`.
    pub fn means(&self) -> Result<Vec<Vec<Vec<f64>>>, BenchmarkError> {
        self.check()?;
        if let Some(m) = &self.class_means {
            return Ok(m.clone());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(MEANS_STREAM);
        Ok(self
            .dims
            .iter()
            .map(|&d| {
                (0..self.num_classes)
                    .map(|_| {
                        (0..d)
                            .map(|_| {
                                let z: f64 = StandardNormal.sample(&mut rng);
                                self.mean_scale * z
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect())
    }
}

fn sample_split(
    spec: &SyntheticSpec,
    means: &[Vec<Vec<f64>>],
    size: usize,
    stream: u64,
) -> ConflictDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    let mut ds = ConflictDataset::new(spec.num_classes, spec.dims.clone());
    for _ in 0..size {
        let label = rng.random_range(0..spec.num_classes);
        let features = means
            .iter()
            .zip(&spec.noise_std)
            .map(|(mm, &s)| {
                mm[label]
                    .iter()
                    .map(|&mu| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        mu + s * z
                    })
                    .collect()
            })
            .collect();
        ds.instances.push(Instance {
            features,
            label,
            provenance: Provenance::Clean,
        });
    }
    ds
}

/// All-clean train, validation and test splits. Each split uses its own
/// random stream, so resizing one split leaves the others unchanged.
pub fn generate_splits(spec: &SyntheticSpec) -> Result<DatasetSplits, BenchmarkError> {
    let means = spec.means()?;
    Ok(DatasetSplits {
        train: sample_split(spec, &means, spec.train_size, 0),
        validation: sample_split(spec, &means, spec.validation_size, 1),
        test: sample_split(spec, &means, spec.test_size, 2),
    })
}

/// The training split alone.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<ConflictDataset, BenchmarkError> {
    let means = spec.means()?;
    Ok(sample_split(spec, &means, spec.train_size, 0))
}
