use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anodae_core::composer::{fit_composer, CompositionModel, DecisionReport};
use anodae_core::data::Dataset;
use anodae_core::metrics::MetricsReport;
use anodae_core::scoring::{write_components_csv, ErrorComponents};
use anyhow::{bail, Result};
use serde::{Deserialize, Serialize};

use crate::config::{CheckpointPolicy, ExperimentConfig, ValidationError};
use crate::events::EventLog;
use crate::run::{components, load_model, read_validation_log, write_json, FoldData, FoldDir, RunDir};
use crate::train::best_record;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointSelector {
    Policy(CheckpointPolicy),
    Epoch(usize),
}

impl FromStr for CheckpointSelector {
    type Err = ValidationError;

    /// `best`, `last`, `<epoch>` or `epoch-<epoch>`.
    fn from_str(s: &str) -> Result<Self, ValidationError> {
        match s {
            "best" => Ok(Self::Policy(CheckpointPolicy::Best)),
            "last" => Ok(Self::Policy(CheckpointPolicy::Last)),
            _ => s
                .trim_start_matches("epoch-")
                .parse()
                .map(Self::Epoch)
                .map_err(|_| ValidationError::new("--checkpoint", format!("expected best, last or an epoch number, got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedCheckpoint {
    pub selector: CheckpointSelector,
    pub epoch: Option<usize>,
    pub path: PathBuf,
    pub validation_weighted_f1: Option<f64>,
}

pub fn select_checkpoint(fold: &FoldDir, selector: CheckpointSelector) -> Result<SelectedCheckpoint> {
    let selected = match selector {
        CheckpointSelector::Policy(CheckpointPolicy::Last) => {
            SelectedCheckpoint { selector, epoch: None, path: fold.last_checkpoint(), validation_weighted_f1: None }
        }
        CheckpointSelector::Policy(CheckpointPolicy::Best) => {
            let records = if fold.validation_log().is_file() { read_validation_log(fold)? } else { Vec::new() };
            let Some(best) = best_record(&records) else {
                bail!("no validation epochs recorded in {}", fold.validation_log().display());
            };
            SelectedCheckpoint {
                selector,
                epoch: Some(best.epoch),
                path: fold.checkpoint(best.epoch),
                validation_weighted_f1: Some(best.weighted_f1),
            }
        }
        CheckpointSelector::Epoch(e) => {
            SelectedCheckpoint { selector, epoch: Some(e), path: fold.checkpoint(e), validation_weighted_f1: None }
        }
    };
    if !selected.path.is_file() {
        bail!("checkpoint not found: expected {}", selected.path.display());
    }
    Ok(selected)
}

/// Proof that composer fitting has finished. Only `fit_composers` makes one.
pub struct Fitted {
    models: BTreeMap<String, CompositionModel>,
}

impl Fitted {
    pub fn models(&self) -> &BTreeMap<String, CompositionModel> {
        &self.models
    }
}

/// Components by phase: test components are only reachable once every
/// composer has been fitted on validation data.
pub struct ComponentStore {
    validation: Vec<ErrorComponents>,
    test: Vec<ErrorComponents>,
}

impl ComponentStore {
    pub fn new(validation: Vec<ErrorComponents>, test: Vec<ErrorComponents>) -> Self {
        Self { validation, test }
    }

    pub fn validation(&self) -> &[ErrorComponents] {
        &self.validation
    }

    pub fn test(&self, _fitted: &Fitted) -> &[ErrorComponents] {
        &self.test
    }
}

pub fn fit_composers(config: &ExperimentConfig, store: &ComponentStore) -> Result<Fitted> {
    let mut models = BTreeMap::new();
    for (name, spec) in &config.composers {
        let model = fit_composer(spec, store.validation())?;
        for w in &model.warnings {
            log::warn!("composer {name}: {w}");
        }
        models.insert(name.clone(), model);
    }
    Ok(Fitted { models })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComposerOutcome {
    pub metrics: MetricsReport,
    pub decisions: DecisionReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldDetection {
    pub fold: usize,
    pub checkpoint: SelectedCheckpoint,
    pub composers: BTreeMap<String, ComposerOutcome>,
}

impl FoldDetection {
    pub fn weighted_f1(&self, composer: &str) -> Option<f64> {
        self.composers.get(composer).map(|c| c.metrics.weighted_f1)
    }
}

/// In-memory detection on one fold; `raw` is the unnormalized dataset the
/// fold's split indexes into.
pub fn detect_in_memory(
    config: &ExperimentConfig,
    fold_dir: &FoldDir,
    raw: &Dataset,
    selector: CheckpointSelector,
) -> Result<(FoldData, SelectedCheckpoint, ComponentStore, Fitted)> {
    let data = FoldData::load(raw, fold_dir)?;
    let checkpoint = select_checkpoint(fold_dir, selector)?;
    let model = load_model(&checkpoint.path)?;
    let (_, val) = components(config, &model, &data.train, &data.validation)?;
    let (_, test) = components(config, &model, &data.train, &data.test)?;
    let store = ComponentStore::new(val, test);
    let fitted = fit_composers(config, &store)?;
    Ok((data, checkpoint, store, fitted))
}

fn outcomes(store: &ComponentStore, fitted: &Fitted) -> Result<BTreeMap<String, ComposerOutcome>> {
    let test = store.test(fitted);
    let mut out = BTreeMap::new();
    for (name, model) in fitted.models() {
        let decisions = model.decide(test)?;
        let truth = decisions
            .truth
            .iter()
            .copied()
            .collect::<Option<Vec<bool>>>()
            .ok_or_else(|| anyhow::anyhow!("test components carry no labels"))?;
        let metrics = MetricsReport::new(&decisions.scores, &truth, &decisions.predicted)?;
        out.insert(name.clone(), ComposerOutcome { metrics, decisions });
    }
    Ok(out)
}

pub fn detect_fold(config: &ExperimentConfig, run: &RunDir, raw: &Dataset, fold: usize, selector: CheckpointSelector) -> Result<FoldDetection> {
    let dir = run.fold(fold);
    let (_, checkpoint, store, fitted) = detect_in_memory(config, &dir, raw, selector)?;
    let out = dir.detect();
    std::fs::create_dir_all(out.join("composers"))?;
    std::fs::create_dir_all(out.join("reports"))?;
    write_json(&out.join("selection.json"), &checkpoint)?;
    write_components_csv(out.join("components_validation.csv"), store.validation())?;
    let composers = outcomes(&store, &fitted)?;
    write_components_csv(out.join("components_test.csv"), store.test(&fitted))?;
    let mut artifacts = Vec::new();
    for (name, model) in fitted.models() {
        let path = out.join("composers").join(format!("{name}.json"));
        model.save(&path)?;
        artifacts.push(path.display().to_string());
        let report = out.join("reports").join(format!("{name}.json"));
        write_json(&report, &composers[name])?;
        artifacts.push(report.display().to_string());
    }
    let detection = FoldDetection { fold, checkpoint, composers };
    let summary: BTreeMap<&String, &MetricsReport> = detection.composers.iter().map(|(k, v)| (k, &v.metrics)).collect();
    write_json(&out.join("summary.json"), &summary)?;
    EventLog::open(dir.events())?.record(
        "detect",
        Some(fold),
        detection.composers.iter().map(|(k, v)| (format!("{k}.weighted_f1"), v.metrics.weighted_f1)),
        artifacts,
    )?;
    Ok(detection)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        Some(Self { mean, std, n: values.len() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComposerSummary {
    pub weighted_f1: MeanStd,
    pub phi: MeanStd,
    pub auroc: Option<MeanStd>,
}

pub fn cmd_detect(run_dir: &Path, only_fold: Option<usize>, selector: Option<CheckpointSelector>) -> Result<Vec<FoldDetection>> {
    let run = RunDir::new(run_dir);
    let config = run.load_config()?;
    let folds = run.folds(&config, only_fold)?;
    let selector = selector.unwrap_or(CheckpointSelector::Policy(config.detect.checkpoint));
    let raw = crate::run::load_dataset(&config)?;
    let mut all = Vec::new();
    for k in folds {
        let d = detect_fold(&config, &run, &raw, k, selector)?;
        for (name, o) in &d.composers {
            log::info!("fold {k} {name}: weighted F1 {:.4}, phi {:.4}", o.metrics.weighted_f1, o.metrics.phi);
        }
        all.push(d);
    }
    if only_fold.is_none() {
        let mut summary = BTreeMap::new();
        for name in config.composers.keys() {
            let pick = |f: &dyn Fn(&MetricsReport) -> Option<f64>| -> Vec<f64> {
                all.iter().filter_map(|d| d.composers.get(name).and_then(|c| f(&c.metrics))).collect()
            };
            if let (Some(w), Some(p)) = (MeanStd::of(&pick(&|m| Some(m.weighted_f1))), MeanStd::of(&pick(&|m| Some(m.phi)))) {
                summary.insert(name.clone(), ComposerSummary { weighted_f1: w, phi: p, auroc: MeanStd::of(&pick(&|m| m.auroc)) });
            }
        }
        write_json(&run.root.join("detect_summary.json"), &summary)?;
    }
    Ok(all)
}
