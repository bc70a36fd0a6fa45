//! Run configuration: one TOML file per run, with command-line overrides.

use std::path::{Path, PathBuf};

use c2mf::benchmark::{ConflictSpec, SyntheticSpec};
use c2mf::circuit::StructureConfig;
use c2mf::model::{Activation, ModelConfig};
use c2mf::training::{Regime, TrainConfig};
use c2mf::FusionMethod;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

/// Architecture settings that are not implied by the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub encoder_widths: Vec<usize>,
    pub aggregator_widths: Vec<usize>,
    pub hypernet_hidden: Vec<usize>,
    pub activation: Activation,
    pub structure: StructureConfig,
}

impl Default for ModelSection {
    fn default() -> Self {
        let base = ModelConfig::new(vec![1], 2, FusionMethod::Dpc, 0);
        Self {
            encoder_widths: base.encoder_widths,
            aggregator_widths: base.aggregator_widths,
            hypernet_hidden: base.hypernet_hidden,
            activation: base.activation,
            structure: base.structure,
        }
    }
}

fn default_lambda_grid() -> Vec<f64> {
    vec![0.0, 0.5, 0.75, 1.0]
}

/// Contents of a run configuration file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed. When present it replaces the seeds of the synthetic,
    /// conflict and training sections.
    #[serde(default)]
    pub seed: Option<u64>,
    /// Output directory.
    #[serde(default)]
    pub out: Option<PathBuf>,
    /// Dataset directory written by `gen-data`. Without it, commands that
    /// need data regenerate it from the synthetic and conflict sections.
    #[serde(default)]
    pub data: Option<PathBuf>,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default = "default_lambda_grid")]
    pub lambda_test: Vec<f64>,
    pub synthetic: SyntheticSpec,
    pub conflict: ConflictSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub model: ModelSection,
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub method: Option<FusionMethod>,
    pub regime: Option<Regime>,
    pub lambda_test: Vec<f64>,
}

/// A configuration with overrides applied and seeds propagated. This is
/// what every artifact embeds.
///
/// Filesystem locations are left out of the serialized form and the hash, so
/// the same run written to two directories produces identical files. The
/// checkpoint is identified by its SHA-256 instead.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResolvedConfig {
    pub seed: u64,
    #[serde(skip)]
    pub out: PathBuf,
    #[serde(skip)]
    pub data: Option<PathBuf>,
    #[serde(skip)]
    pub checkpoint: Option<PathBuf>,
    pub lambda_test: Vec<f64>,
    pub synthetic: SyntheticSpec,
    pub conflict: ConflictSpec,
    pub train: TrainConfig,
    pub model: ModelSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Usage(format!("invalid config: {}", e.message())))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn resolve(mut self, ov: &Overrides) -> Result<ResolvedConfig, CliError> {
        let seed = ov.seed.or(self.seed);
        if let Some(s) = seed {
            self.synthetic.seed = s;
            self.conflict.seed = s;
            self.train.seed = s;
        }
        if let Some(m) = ov.method {
            self.train.method = m;
        }
        if let Some(r) = ov.regime {
            self.train.regime = r;
        }
        if !ov.lambda_test.is_empty() {
            self.lambda_test = ov.lambda_test.clone();
        }
        let out = ov
            .out
            .clone()
            .or(self.out)
            .ok_or_else(|| CliError::Usage("no output directory (set `out` or pass --out)".into()))?;
        if self.lambda_test.is_empty() {
            return Err(CliError::Usage("the lambda_test grid is empty".into()));
        }
        if let Some(l) = self.lambda_test.iter().find(|l| !(0.0..=1.0).contains(*l)) {
            return Err(CliError::Usage(format!("lambda_test value {l} is outside [0, 1]")));
        }
        self.train
            .check()
            .map_err(|e| CliError::Usage(e.to_string()))?;
        self.conflict
            .check(self.synthetic.num_classes, self.synthetic.dims.len())
            .map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(ResolvedConfig {
            seed: seed.unwrap_or(self.train.seed),
            out,
            data: ov.data.clone().or(self.data),
            checkpoint: ov.checkpoint.clone().or(self.checkpoint),
            lambda_test: self.lambda_test,
            synthetic: self.synthetic,
            conflict: self.conflict,
            train: self.train,
            model: self.model,
        })
    }
}

impl ResolvedConfig {
    /// First 16 hex digits of the SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("configs serialize");
        hex::encode(Sha256::digest(json.as_bytes()))[..16].to_string()
    }

    /// Model configuration for `method`, shaped by the synthetic data.
    pub fn model_config(&self, method: FusionMethod) -> ModelConfig {
        let mut mc = ModelConfig::new(
            self.synthetic.dims.clone(),
            self.synthetic.num_classes,
            method,
            self.train.seed,
        );
        mc.encoder_widths = self.model.encoder_widths.clone();
        mc.aggregator_widths = self.model.aggregator_widths.clone();
        mc.hypernet_hidden = self.model.hypernet_hidden.clone();
        mc.activation = self.model.activation;
        mc.structure = self.model.structure;
        mc
    }
}
