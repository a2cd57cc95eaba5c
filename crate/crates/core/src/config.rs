//! Experiment configuration.
//!
//! Configs are flat TOML: top-level scalars plus dotted keys for the nested
//! sections, e.g.
//!
//! ```toml
//! seed = 7
//! mode = "fedcova"
//! rounds = 120
//! eps_sq = 1.0
//! alpha = 2.0
//! noise.device_ratio = 0.6
//! noise.sample_ratio = 0.7
//! partition.num_devices = 8
//! ```
//!
//! Unknown keys are rejected so typos cannot silently fall back to defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::num_parameters;
use crate::error::{Error, Result};
use crate::fleet::{cyclic_flip_map, NoisePattern, NoiseSpec, PartitionSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Fedcova,
    FedavgCe,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Fedcova => "fedcova",
            Mode::FedavgCe => "fedavg_ce",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden layer widths between the input and the feature layer.
    #[serde(default = "default_hidden")]
    pub hidden_dims: Vec<usize>,
    /// Feature dimension `d`.
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    #[serde(default = "default_input_dim")]
    pub input_dim: usize,
    #[serde(default = "default_train_per_class")]
    pub samples_per_class: usize,
    #[serde(default = "default_test_per_class")]
    pub test_samples_per_class: usize,
    #[serde(default = "default_separation")]
    pub class_separation: f64,
    /// Optional training set in the binary ingest format; replaces the
    /// synthesizer when set (requires `test_path`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    #[serde(default)]
    pub device_ratio: f64,
    #[serde(default)]
    pub sample_ratio: f64,
    #[serde(default = "default_pattern")]
    pub pattern: NoisePattern,
    /// Asymmetric targets; defaults to `j → (j+1) mod J`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flip_map: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    #[serde(default = "default_bernoulli")]
    pub bernoulli_p: f64,
    #[serde(default = "default_dirichlet")]
    pub dirichlet_alpha: f64,
    #[serde(default = "default_devices")]
    pub num_devices: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub mode: Mode,
    pub rounds: usize,
    /// Error tolerance `ε²`.
    pub eps_sq: f64,
    /// Subspace augmentation exponent.
    pub alpha: f64,
    #[serde(default = "default_local_epochs")]
    pub local_epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Relabeling confidence threshold.
    #[serde(default = "default_eta_c")]
    pub eta_c: f64,
    #[serde(default = "default_beta_cov")]
    pub beta_cov: f64,
    #[serde(default = "default_correction_start")]
    pub correction_start: usize,
    #[serde(default = "default_correction_period")]
    pub correction_period: usize,
    /// Defaults to `⌈M/2⌉`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_k1: Option<usize>,
    /// Defaults to `⌈M/4⌉`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_k2: Option<usize>,
    /// Fraction of devices sampled each round.
    #[serde(default = "default_participation")]
    pub participation: f64,
    /// Train devices on a worker pool. Results do not depend on it.
    #[serde(default)]
    pub parallel: bool,
    #[serde(default = "default_model")]
    pub model: ModelConfig,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerConfig,
    #[serde(default = "default_data")]
    pub data: DataConfig,
    #[serde(default = "default_noise")]
    pub noise: NoiseConfig,
    #[serde(default = "default_partition")]
    pub partition: PartitionConfig,
}

fn default_hidden() -> Vec<usize> {
    vec![64, 64]
}
fn default_feature_dim() -> usize {
    8
}
fn default_lr() -> f64 {
    0.05
}
fn default_momentum() -> f64 {
    0.9
}
fn default_weight_decay() -> f64 {
    5e-4
}
fn default_classes() -> usize {
    4
}
fn default_input_dim() -> usize {
    16
}
fn default_train_per_class() -> usize {
    250
}
fn default_test_per_class() -> usize {
    250
}
fn default_separation() -> f64 {
    3.0
}
fn default_pattern() -> NoisePattern {
    NoisePattern::Symmetric
}
fn default_bernoulli() -> f64 {
    0.5
}
fn default_dirichlet() -> f64 {
    5.0
}
fn default_devices() -> usize {
    8
}
fn default_local_epochs() -> usize {
    1
}
fn default_batch() -> usize {
    64
}
fn default_eta_c() -> f64 {
    0.5
}
fn default_beta_cov() -> f64 {
    0.5
}
fn default_correction_start() -> usize {
    40
}
fn default_correction_period() -> usize {
    10
}
fn default_participation() -> f64 {
    1.0
}
fn default_model() -> ModelConfig {
    ModelConfig {
        hidden_dims: default_hidden(),
        feature_dim: default_feature_dim(),
    }
}
fn default_optimizer() -> OptimizerConfig {
    OptimizerConfig {
        learning_rate: default_lr(),
        momentum: default_momentum(),
        weight_decay: default_weight_decay(),
    }
}
fn default_data() -> DataConfig {
    DataConfig {
        num_classes: default_classes(),
        input_dim: default_input_dim(),
        samples_per_class: default_train_per_class(),
        test_samples_per_class: default_test_per_class(),
        class_separation: default_separation(),
        path: None,
        test_path: None,
    }
}
fn default_noise() -> NoiseConfig {
    NoiseConfig {
        device_ratio: 0.0,
        sample_ratio: 0.0,
        pattern: default_pattern(),
        flip_map: None,
    }
}
fn default_partition() -> PartitionConfig {
    PartitionConfig {
        bernoulli_p: default_bernoulli(),
        dirichlet_alpha: default_dirichlet(),
        num_devices: default_devices(),
    }
}

impl ExperimentConfig {
    /// A config with every optional field at its desk-scale default.
    pub fn desk_default(seed: u64, mode: Mode, rounds: usize, eps_sq: f64, alpha: f64) -> Self {
        Self {
            seed,
            mode,
            rounds,
            eps_sq,
            alpha,
            local_epochs: default_local_epochs(),
            batch_size: default_batch(),
            eta_c: default_eta_c(),
            beta_cov: default_beta_cov(),
            correction_start: default_correction_start(),
            correction_period: default_correction_period(),
            top_k1: None,
            top_k2: None,
            participation: default_participation(),
            parallel: false,
            model: default_model(),
            optimizer: default_optimizer(),
            data: default_data(),
            noise: default_noise(),
            partition: default_partition(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::ConfigParse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Resolved config as TOML; re-loading it yields the same experiment.
    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::ConfigParse(e.to_string()))
    }

    /// SHA-256 of the resolved config. Field order is fixed by the struct,
    /// so the hash does not depend on key order in the source file.
    pub fn hash_hex(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes to JSON");
        Sha256::digest(&canonical)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn num_devices(&self) -> usize {
        self.partition.num_devices
    }

    pub fn top_k1(&self) -> usize {
        self.top_k1.unwrap_or(self.num_devices().div_ceil(2))
    }

    pub fn top_k2(&self) -> usize {
        self.top_k2.unwrap_or(self.num_devices().div_ceil(4))
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.data.input_dim];
        dims.extend(&self.model.hidden_dims);
        dims.push(self.model.feature_dim);
        dims
    }

    pub fn encoder_parameters(&self) -> usize {
        num_parameters(&self.layer_dims())
    }

    pub fn noise_spec(&self) -> NoiseSpec {
        NoiseSpec {
            device_ratio: self.noise.device_ratio,
            sample_ratio: self.noise.sample_ratio,
            pattern: self.noise.pattern,
            flip_map: self
                .noise
                .flip_map
                .clone()
                .unwrap_or_else(|| cyclic_flip_map(self.data.num_classes)),
        }
    }

    pub fn partition_spec(&self) -> PartitionSpec {
        PartitionSpec {
            bernoulli_p: self.partition.bernoulli_p,
            dirichlet_alpha: self.partition.dirichlet_alpha,
            num_devices: self.partition.num_devices,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: String| Err(Error::ConfigParse(format!("field `{field}`: {why}")));
        let m = self.num_devices();
        if m == 0 {
            return bad("partition.num_devices", "must be positive".into());
        }
        if !(self.eps_sq > 0.0) || !self.eps_sq.is_finite() {
            return bad("eps_sq", format!("must be positive, got {}", self.eps_sq));
        }
        if !(self.alpha >= 1.0) || !self.alpha.is_finite() {
            return bad("alpha", format!("must be >= 1, got {}", self.alpha));
        }
        if !(self.eta_c > 0.0 && self.eta_c <= 1.0) {
            return bad("eta_c", format!("must be in (0, 1], got {}", self.eta_c));
        }
        if !(0.0..1.0).contains(&self.beta_cov) {
            return bad("beta_cov", format!("must be in [0, 1), got {}", self.beta_cov));
        }
        if self.correction_period == 0 {
            return bad("correction_period", "must be at least 1".into());
        }
        if self.correction_start > self.rounds {
            return bad("correction_start", format!("{} exceeds rounds {}", self.correction_start, self.rounds));
        }
        if self.top_k1() > m {
            return bad("top_k1", format!("{} exceeds device count {m}", self.top_k1()));
        }
        if self.top_k2() > self.top_k1() {
            return bad("top_k2", format!("{} exceeds top_k1 {}", self.top_k2(), self.top_k1()));
        }
        if self.local_epochs == 0 {
            return bad("local_epochs", "must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1".into());
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return bad("participation", format!("must be in (0, 1], got {}", self.participation));
        }
        if self.model.feature_dim == 0 || self.model.hidden_dims.contains(&0) {
            return bad("model", "layer widths must be positive".into());
        }
        let o = &self.optimizer;
        if !(o.learning_rate > 0.0) || !(0.0..1.0).contains(&o.momentum) || !(o.weight_decay >= 0.0) {
            return bad("optimizer", "need learning_rate > 0, momentum in [0, 1), weight_decay >= 0".into());
        }
        let d = &self.data;
        if d.num_classes < 2 || d.input_dim < 2 {
            return bad("data", "need at least 2 classes and 2 input dims".into());
        }
        if d.path.is_some() != d.test_path.is_some() {
            return bad("data.test_path", "data.path and data.test_path must be set together".into());
        }
        if d.path.is_none() && (d.samples_per_class == 0 || d.test_samples_per_class == 0) {
            return bad("data.samples_per_class", "must be positive".into());
        }
        for (field, v) in [("noise.device_ratio", self.noise.device_ratio), ("noise.sample_ratio", self.noise.sample_ratio)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(field, format!("must be in [0, 1], got {v}"));
            }
        }
        if let Some(map) = &self.noise.flip_map {
            if map.len() != d.num_classes || map.iter().enumerate().any(|(j, &t)| t == j || t >= d.num_classes) {
                return bad("noise.flip_map", "needs one non-identity target per class".into());
            }
        }
        let p = &self.partition;
        if !(p.bernoulli_p > 0.0 && p.bernoulli_p <= 1.0) {
            return bad("partition.bernoulli_p", format!("must be in (0, 1], got {}", p.bernoulli_p));
        }
        if !(p.dirichlet_alpha > 0.0) {
            return bad("partition.dirichlet_alpha", "must be positive".into());
        }
        Ok(())
    }
}
