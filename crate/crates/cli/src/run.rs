//! Run directory layout and the data each fold works on.

use std::path::{Path, PathBuf};

use anodae_core::data::synthetic::generate;
use anodae_core::data::{ingest_csv, Dataset, FoldSplit, MinMaxStats, NormalizationReport};
use anodae_core::model::{checkpoint_name, ModelState};
use anodae_core::scoring::{l2_norm, latent_means, score_dataset, ErrorComponents, LatentReference, SCORING_BATCH};
use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use crate::config::{DataSource, ExperimentConfig, ValidationError};

/// ```text
/// <run>/config.toml            resolved config
/// <run>/events.jsonl           run-level events
/// <run>/fold-<k>/split.json
/// <run>/fold-<k>/normalization.json
/// <run>/fold-<k>/losses.csv, epochs.csv, validation.jsonl, events.jsonl
/// <run>/fold-<k>/validation/epoch-NNNN.csv
/// <run>/fold-<k>/checkpoints/epoch-NNNN.ckpt, last.ckpt
/// <run>/fold-<k>/detect/, evaluate/, plots/
/// ```
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn events_path(&self) -> PathBuf {
        self.root.join("events.jsonl")
    }

    pub fn fold(&self, k: usize) -> FoldDir {
        FoldDir { root: self.root.join(format!("fold-{k}")) }
    }

    pub fn load_config(&self) -> Result<ExperimentConfig> {
        let path = self.config_path();
        if !path.is_file() {
            return Err(ValidationError::new("--run-dir", format!("{} holds no config.toml", self.root.display())).into());
        }
        Ok(ExperimentConfig::load(&path)?)
    }

    /// Folds selected by `--fold`, or all.
    pub fn folds(&self, config: &ExperimentConfig, only: Option<usize>) -> Result<Vec<usize>> {
        match only {
            Some(k) if k >= config.dataset.folds => {
                Err(ValidationError::new("--fold", format!("fold {k} out of range 0..{}", config.dataset.folds)).into())
            }
            Some(k) => Ok(vec![k]),
            None => Ok((0..config.dataset.folds).collect()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FoldDir {
    pub root: PathBuf,
}

impl FoldDir {
    pub fn split(&self) -> PathBuf {
        self.root.join("split.json")
    }

    pub fn normalization(&self) -> PathBuf {
        self.root.join("normalization.json")
    }

    pub fn losses(&self) -> PathBuf {
        self.root.join("losses.csv")
    }

    pub fn epochs(&self) -> PathBuf {
        self.root.join("epochs.csv")
    }

    pub fn validation_log(&self) -> PathBuf {
        self.root.join("validation.jsonl")
    }

    pub fn events(&self) -> PathBuf {
        self.root.join("events.jsonl")
    }

    pub fn validation_components(&self, epoch: usize) -> PathBuf {
        self.root.join("validation").join(format!("epoch-{epoch:04}.csv"))
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn checkpoint(&self, epoch: usize) -> PathBuf {
        self.checkpoints().join(checkpoint_name(epoch))
    }

    pub fn last_checkpoint(&self) -> PathBuf {
        self.checkpoints().join("last.ckpt")
    }

    pub fn detect(&self) -> PathBuf {
        self.root.join("detect")
    }

    pub fn evaluate(&self) -> PathBuf {
        self.root.join("evaluate")
    }

    pub fn plots(&self) -> PathBuf {
        self.root.join("plots")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationFile {
    pub stats: MinMaxStats,
    pub validation: NormalizationReport,
    pub test: NormalizationReport,
}

/// One line of `validation.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub epoch: usize,
    pub checkpoint: Option<PathBuf>,
    pub weighted_f1: f64,
    pub mean_r_normal: f64,
    pub mean_r_abnormal: f64,
    pub latent_mode: f64,
}

pub fn read_validation_log(fold: &FoldDir) -> Result<Vec<ValidationRecord>> {
    let path = fold.validation_log();
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{} line {}", path.display(), i + 1)))
        .collect()
}

/// Raw series at the configured length, before normalization.
pub fn load_dataset(config: &ExperimentConfig) -> Result<Dataset> {
    let ds = match &config.dataset.source {
        DataSource::Synthetic(s) => generate(s)?,
        DataSource::Csv { path, schema } => {
            if !path.is_file() {
                return Err(ValidationError::new("dataset.source.path", format!("{} is not a file", path.display())).into());
            }
            ingest_csv(path, schema)?
        }
    };
    Ok(if ds.seq_len == config.dataset.seq_len { ds } else { ds.resampled(config.dataset.seq_len)? })
}

/// Normalized splits of one fold.
pub struct FoldData {
    pub split: FoldSplit,
    pub stats: MinMaxStats,
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
    pub reports: (NormalizationReport, NormalizationReport),
}

impl FoldData {
    /// Normalization statistics come from the training split only.
    pub fn new(raw: &Dataset, split: FoldSplit) -> Result<Self> {
        split.validate(raw)?;
        let train_raw = raw.subset(&split.train_idx)?;
        let stats = MinMaxStats::fit(&train_raw)?;
        let (train, _) = stats.apply(&train_raw);
        let (validation, rv) = stats.apply(&raw.subset(&split.val_idx)?);
        let (test, rt) = stats.apply(&raw.subset(&split.test_idx)?);
        Ok(Self { split, stats, train, validation, test, reports: (rv, rt) })
    }

    /// Rebuilds a fold from its persisted split file.
    pub fn load(raw: &Dataset, fold: &FoldDir) -> Result<Self> {
        let path = fold.split();
        if !path.is_file() {
            bail!("split file not found: {}", path.display());
        }
        let data = Self::new(raw, FoldSplit::load(&path)?)?;
        let saved: NormalizationFile = serde_json::from_str(&std::fs::read_to_string(fold.normalization())?)?;
        if saved.stats != data.stats {
            bail!("normalization in {} does not match the training split", fold.normalization().display());
        }
        Ok(data)
    }
}

pub fn fold_seed(seed: u64, fold: usize) -> u64 {
    seed ^ (fold as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

pub fn load_model(path: &Path) -> Result<ModelState> {
    if !path.is_file() {
        bail!("checkpoint not found: {}", path.display());
    }
    Ok(anodae_core::model::Checkpoint::load(path)?.into_model()?)
}

pub fn latent_reference(config: &ExperimentConfig, model: &ModelState, train: &Dataset) -> Result<LatentReference> {
    let norms: Vec<f64> = latent_means(model, train)?.iter().map(|z| l2_norm(z)).collect();
    Ok(LatentReference::fit(config.latent_style(), model.latent_dim(), &norms, config.scoring.bins)?)
}

pub fn components(
    config: &ExperimentConfig,
    model: &ModelState,
    train: &Dataset,
    target: &Dataset,
) -> Result<(LatentReference, Vec<ErrorComponents>)> {
    let reference = latent_reference(config, model, train)?;
    Ok((reference, score_dataset(model, target, &reference)?))
}

/// Reconstructions mapped to the unit range, in sample order.
pub fn reconstructions(model: &ModelState, dataset: &Dataset) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(dataset.len());
    for chunk in dataset.samples.chunks(SCORING_BATCH) {
        let rows: Vec<&[f64]> = chunk.iter().map(|s| s.values.as_slice()).collect();
        let (_, x_hat) = model.reconstruct(&model.batch_tensor(&rows)?)?;
        let tanh = model.variant.output() == anodae_core::model::OutputActivation::Tanh;
        out.extend(x_hat.rows().map(|r| if tanh { r.iter().map(|v| (v + 1.0) / 2.0).collect() } else { r.to_vec() }));
    }
    Ok(out)
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}
