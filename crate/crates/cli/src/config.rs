//! Experiment configuration, stored as TOML.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use anodae_core::composer::{default_composers, ComposerSpec};
use anodae_core::data::synthetic::SyntheticConfig;
use anodae_core::data::CsvSchema;
use anodae_core::latent::RefineConfig;
use anodae_core::metrics::ClassifierConfig;
use anodae_core::model::{ArchSpec, TrainConfig, Variant};
use anodae_core::scoring::{LatentStyle, DEFAULT_BINS};
use serde::{Deserialize, Serialize};

pub const OUTPUT_ROOT_ENV: &str = "ANODAE_OUTPUT_ROOT";

/// A problem with user input, reported before any compute. Maps to exit
/// code 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationError {
    pub field: String,
    pub message: String,
}

impl ValidationError {
    pub fn new(field: impl Into<String>, message: impl fmt::Display) -> Self {
        Self { field: field.into(), message: message.to_string() }
    }
}

impl fmt::Display for ValidationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid `{}`: {}", self.field, self.message)
    }
}

impl std::error::Error for ValidationError {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Run directory name under the output root.
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub scoring: ScoringConfig,
    #[serde(default = "default_composer_map")]
    pub composers: BTreeMap<String, ComposerSpec>,
    #[serde(default)]
    pub detect: DetectConfig,
    #[serde(default)]
    pub evaluate: EvaluateConfig,
    #[serde(default)]
    pub export: ExportConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_composer_map() -> BTreeMap<String, ComposerSpec> {
    default_composers().into_iter().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    /// Length every series is resampled to.
    pub seq_len: usize,
    #[serde(default = "default_folds")]
    pub folds: usize,
    pub source: DataSource,
}

fn default_folds() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SyntheticConfig),
    Csv {
        path: PathBuf,
        #[serde(default)]
        schema: CsvSchema,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    #[serde(default)]
    pub arch: ArchSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoringConfig {
    /// Unset: `fixed_chi` for a variational model with a positive KL
    /// weight, `empirical` otherwise.
    pub latent_style: Option<LatentStyle>,
    pub bins: usize,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self { latent_style: None, bins: DEFAULT_BINS }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointPolicy {
    /// Validation epoch with the highest weighted F1 of the selection
    /// composer; earliest on ties.
    Best,
    Last,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectConfig {
    pub checkpoint: CheckpointPolicy,
    /// Composer used to rank validation epochs.
    pub selection_composer: ComposerSpec,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self { checkpoint: CheckpointPolicy::Best, selection_composer: ComposerSpec::lambda_grid() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    pub tstr: bool,
    /// Most recent validation checkpoints measured.
    pub tstr_checkpoints: usize,
    pub tstr_window: usize,
    pub classifier: ClassifierConfig,
    /// Unset: on exactly when the KL weight is positive.
    pub chi_fit: Option<bool>,
    pub trajectory: bool,
    pub refine: Option<RefineConfig>,
    pub refine_samples: usize,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            tstr: true,
            tstr_checkpoints: 5,
            tstr_window: 5,
            classifier: ClassifierConfig::default(),
            chi_fit: None,
            trajectory: true,
            refine: None,
            refine_samples: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExportConfig {
    pub reconstruction_pairs: usize,
    pub interpolation_dims: Vec<usize>,
    pub interpolation_radius: f64,
    pub interpolation_steps: usize,
    pub histogram_bins: usize,
}

impl Default for ExportConfig {
    fn default() -> Self {
        Self {
            reconstruction_pairs: 16,
            interpolation_dims: vec![0, 1],
            interpolation_radius: 2.0,
            interpolation_steps: 4,
            histogram_bins: 50,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ValidationError> {
        let config: Self = toml::from_str(text).map_err(|e| {
            let message = e.message().to_string();
            ValidationError::new(field_of(&e).unwrap_or_else(|| "config".into()), message)
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ValidationError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ValidationError::new("--config", format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is representable as TOML")
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_toml())
    }

    /// Forces the derived seeds to follow `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn latent_style(&self) -> LatentStyle {
        self.scoring.latent_style.unwrap_or(if self.kl_active() { LatentStyle::FixedChi } else { LatentStyle::Empirical })
    }

    pub fn kl_active(&self) -> bool {
        self.model.variant.is_variational() && self.train.beta_raw > 0.0
    }

    pub fn chi_fit_enabled(&self) -> bool {
        self.evaluate.chi_fit.unwrap_or(self.train.beta_raw > 0.0)
    }

    /// Root under which `name` is created; the environment wins over the
    /// config.
    pub fn output_root(&self) -> PathBuf {
        std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| self.output_dir.clone())
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        let bad = |field: &str, msg: String| Err(ValidationError::new(field, msg));
        if self.name.trim().is_empty() || self.name.contains(['/', '\\']) {
            return bad("name", format!("must be a plain directory name, got {:?}", self.name));
        }
        if self.dataset.seq_len < 2 {
            return bad("dataset.seq_len", format!("must be at least 2, got {}", self.dataset.seq_len));
        }
        if self.dataset.folds < 2 {
            return bad("dataset.folds", format!("must be at least 2, got {}", self.dataset.folds));
        }
        match &self.dataset.source {
            DataSource::Synthetic(s) => {
                if s.normal < 2 || s.abnormal < 2 || s.seq_len < 8 {
                    return bad("dataset.source", "synthetic data needs >= 2 samples per class and seq_len >= 8".into());
                }
                if !(s.noise_std >= 0.0 && s.noise_std.is_finite()) {
                    return bad("dataset.source.noise_std", format!("must be a nonnegative number, got {}", s.noise_std));
                }
            }
            DataSource::Csv { path, .. } => {
                if path.as_os_str().is_empty() {
                    return bad("dataset.source.path", "is empty".into());
                }
            }
        }
        if self.model.arch.seq_len != self.dataset.seq_len {
            return bad(
                "model.arch.seq_len",
                format!("{} must equal dataset.seq_len {}", self.model.arch.seq_len, self.dataset.seq_len),
            );
        }
        self.model.arch.validate().or_else(|e| bad("model.arch", strip(e)))?;
        self.train.validate().or_else(|e| bad("train", strip(e)))?;
        if self.scoring.bins < 2 {
            return bad("scoring.bins", format!("must be at least 2, got {}", self.scoring.bins));
        }
        if self.composers.is_empty() {
            return bad("composers", "at least one composer is required".into());
        }
        for (name, spec) in &self.composers {
            spec.validate().or_else(|e| bad(&format!("composers.{name}"), strip(e)))?;
        }
        self.detect.selection_composer.validate().or_else(|e| bad("detect.selection_composer", strip(e)))?;
        let ev = &self.evaluate;
        if ev.tstr_window == 0 || ev.tstr_checkpoints == 0 {
            return bad("evaluate", "tstr_window and tstr_checkpoints must be positive".into());
        }
        ev.classifier.validate().or_else(|e| bad("evaluate.classifier", strip(e)))?;
        let ex = &self.export;
        if let Some(&d) = ex.interpolation_dims.iter().find(|&&d| d >= self.model.arch.latent_dim) {
            return bad("export.interpolation_dims", format!("dimension {d} exceeds latent_dim {}", self.model.arch.latent_dim));
        }
        if ex.interpolation_steps == 0 || !(ex.interpolation_radius >= 0.0) || ex.histogram_bins == 0 {
            return bad("export", "interpolation_steps and histogram_bins must be positive and the radius nonnegative".into());
        }
        Ok(())
    }
}

fn strip(e: anodae_core::CoreError) -> String {
    match e {
        anodae_core::CoreError::Contract(m) => m,
        other => other.to_string(),
    }
}

/// Best-effort dotted path of the key a TOML error points at.
fn field_of(e: &toml::de::Error) -> Option<String> {
    let msg = e.message();
    let start = msg.find('`')? + 1;
    let end = start + msg[start..].find('`')?;
    Some(msg[start..end].to_string())
}

/// Synthetic benchmark at the desk scale used for acceptance.
pub fn synthetic_preset(name: &str, epochs: usize, folds: usize) -> ExperimentConfig {
    let mut train = TrainConfig { epochs, batch_size: 32, validate_every: 5, ..Default::default() };
    train.seed = 0;
    ExperimentConfig {
        name: name.into(),
        seed: 0,
        output_dir: default_output_dir(),
        dataset: DatasetConfig { seq_len: 160, folds, source: DataSource::Synthetic(SyntheticConfig::default()) },
        model: ModelConfig { variant: Variant::Anodae, arch: ArchSpec::default() },
        train,
        scoring: ScoringConfig::default(),
        composers: default_composer_map(),
        detect: DetectConfig::default(),
        evaluate: EvaluateConfig::default(),
        export: ExportConfig::default(),
    }
}
