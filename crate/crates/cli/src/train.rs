use std::fs::File;
use std::path::{Path, PathBuf};

use anodae_core::composer::fit_composer;
use anodae_core::data::{make_splits, Dataset};
use anodae_core::model::{train, EpochSummary, LossRecord, ModelState, TrainConfig, TrainObserver, TrainOptions};
use anodae_core::scoring::{write_components_csv, ErrorComponents};
use anodae_core::CoreError;
use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::events::EventLog;
use crate::run::{components, fold_seed, write_json, FoldData, FoldDir, NormalizationFile, RunDir, ValidationRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldTrainSummary {
    pub fold: usize,
    pub epochs: usize,
    pub final_epoch: Option<EpochSummary>,
    pub validation_epochs: Vec<usize>,
    pub best_epoch: Option<usize>,
    pub best_weighted_f1: Option<f64>,
}

struct FoldObserver<'a> {
    config: &'a ExperimentConfig,
    fold: usize,
    dir: &'a FoldDir,
    data: &'a FoldData,
    steps: csv::Writer<File>,
    epochs: csv::Writer<File>,
    validation: File,
    events: EventLog,
    records: Vec<ValidationRecord>,
    error: Option<anyhow::Error>,
}

fn mean_r(components: &[ErrorComponents], abnormal: bool) -> f64 {
    let r: Vec<f64> = components.iter().filter(|c| c.is_abnormal() == Some(abnormal)).map(|c| c.r).collect();
    if r.is_empty() {
        f64::NAN
    } else {
        r.iter().sum::<f64>() / r.len() as f64
    }
}

impl FoldObserver<'_> {
    fn validate(&mut self, model: &ModelState, epoch: usize, checkpoint: Option<&Path>) -> Result<()> {
        use std::io::Write;
        let (reference, comps) = components(self.config, model, &self.data.train, &self.data.validation)?;
        let path = self.dir.validation_components(epoch);
        std::fs::create_dir_all(path.parent().expect("has parent"))?;
        write_components_csv(&path, &comps)?;
        let fit = fit_composer(&self.config.detect.selection_composer, &comps)?;
        let record = ValidationRecord {
            epoch,
            checkpoint: checkpoint.map(Path::to_path_buf),
            weighted_f1: fit.fit_objective,
            mean_r_normal: mean_r(&comps, false),
            mean_r_abnormal: mean_r(&comps, true),
            latent_mode: reference.mode,
        };
        writeln!(self.validation, "{}", serde_json::to_string(&record)?)?;
        self.events.record(
            "validation",
            Some(self.fold),
            [
                ("epoch".to_string(), epoch as f64),
                ("weighted_f1".to_string(), record.weighted_f1),
                ("mean_r_normal".to_string(), record.mean_r_normal),
                ("mean_r_abnormal".to_string(), record.mean_r_abnormal),
            ],
            checkpoint.map(|p| p.display().to_string()).into_iter().chain([path.display().to_string()]),
        )?;
        self.records.push(record);
        Ok(())
    }

    fn fail(&mut self, e: anyhow::Error) -> CoreError {
        let msg = format!("{e:#}");
        self.error = Some(e);
        CoreError::contract(msg)
    }
}

impl TrainObserver for FoldObserver<'_> {
    fn on_step(&mut self, record: &LossRecord) {
        if self.error.is_none() {
            if let Err(e) = self.steps.serialize(record) {
                self.error = Some(e.into());
            }
        }
    }

    fn on_epoch(&mut self, summary: &EpochSummary) -> anodae_core::Result<()> {
        let res = (|| -> Result<()> {
            self.epochs.serialize(summary)?;
            self.epochs.flush()?;
            self.steps.flush()?;
            self.events.record(
                "epoch",
                Some(self.fold),
                [
                    ("epoch".to_string(), summary.epoch as f64),
                    ("l_d".to_string(), summary.l_d),
                    ("l_adv".to_string(), summary.l_adv),
                    ("l_rec".to_string(), summary.l_rec),
                    ("l_kl".to_string(), summary.l_kl),
                    ("l_g".to_string(), summary.l_g),
                    ("seconds".to_string(), summary.seconds),
                ],
                [],
            )
        })();
        res.map_err(|e| self.fail(e))
    }

    fn on_validation(&mut self, model: &ModelState, epoch: usize, checkpoint: Option<&Path>) -> anodae_core::Result<()> {
        self.validate(model, epoch, checkpoint).map_err(|e| self.fail(e))
    }
}

/// Best validation epoch; the earliest wins ties.
pub fn best_record(records: &[ValidationRecord]) -> Option<&ValidationRecord> {
    records.iter().fold(None, |best: Option<&ValidationRecord>, r| match best {
        Some(b) if b.weighted_f1 >= r.weighted_f1 => Some(b),
        _ => Some(r),
    })
}

fn train_fold(config: &ExperimentConfig, run: &RunDir, raw: &Dataset, fold: usize, split: anodae_core::data::FoldSplit) -> Result<FoldTrainSummary> {
    let dir = run.fold(fold);
    if dir.root.exists() {
        std::fs::remove_dir_all(&dir.root).with_context(|| format!("clearing {}", dir.root.display()))?;
    }
    std::fs::create_dir_all(&dir.root)?;
    split.save(dir.split())?;
    let data = FoldData::new(raw, split)?;
    write_json(
        &dir.normalization(),
        &NormalizationFile { stats: data.stats, validation: data.reports.0.clone(), test: data.reports.1.clone() },
    )?;
    if data.reports.0.out_of_range() || data.reports.1.out_of_range() {
        log::warn!("fold {fold}: validation/test values fall outside the training range (see {})", dir.normalization().display());
    }

    let seed = fold_seed(config.seed, fold);
    let train_config = TrainConfig { seed, ..config.train.clone() };
    let mut model = ModelState::new(config.model.arch.clone(), config.model.variant, seed)?;
    let mut observer = FoldObserver {
        config,
        fold,
        dir: &dir,
        data: &data,
        steps: csv::Writer::from_path(dir.losses())?,
        epochs: csv::Writer::from_path(dir.epochs())?,
        validation: File::create(dir.validation_log())?,
        events: EventLog::open(dir.events())?,
        records: Vec::new(),
        error: None,
    };
    observer.events.record(
        "train_start",
        Some(fold),
        [
            ("train".to_string(), data.train.len() as f64),
            ("validation".to_string(), data.validation.len() as f64),
            ("test".to_string(), data.test.len() as f64),
            ("parameters".to_string(), model.param_count() as f64),
        ],
        [dir.split().display().to_string()],
    )?;
    let options = TrainOptions { checkpoint_dir: Some(dir.checkpoints()) };
    let outcome = train(&mut model, &data.train, &train_config, &options, &mut observer);
    if let Some(e) = observer.error.take() {
        return Err(e.context(format!("fold {fold}")));
    }
    let outcome = outcome.with_context(|| format!("training fold {fold}"))?;
    observer.steps.flush()?;
    let best = best_record(&observer.records);
    let summary = FoldTrainSummary {
        fold,
        epochs: outcome.epochs.len(),
        final_epoch: outcome.epochs.last().cloned(),
        validation_epochs: observer.records.iter().map(|r| r.epoch).collect(),
        best_epoch: best.map(|r| r.epoch),
        best_weighted_f1: best.map(|r| r.weighted_f1),
    };
    observer.events.record(
        "train_end",
        Some(fold),
        summary.final_epoch.iter().map(|e| ("l_g".to_string(), e.l_g)).chain(summary.best_weighted_f1.map(|f| ("best_weighted_f1".to_string(), f))),
        [dir.last_checkpoint().display().to_string()],
    )?;
    Ok(summary)
}

/// Trains every selected fold, writing the run directory.
pub fn cmd_train(config: &ExperimentConfig, run_dir: &Path, only_fold: Option<usize>) -> Result<Vec<FoldTrainSummary>> {
    let run = RunDir::new(run_dir);
    let folds = run.folds(config, only_fold)?;
    let raw = crate::run::load_dataset(config)?;
    std::fs::create_dir_all(run_dir).with_context(|| format!("creating {}", run_dir.display()))?;
    config.save(&run.config_path())?;
    // single-fold invocations may run concurrently, so they only write
    // inside their fold directory
    let mut events = if only_fold.is_none() { Some(EventLog::open(run.events_path())?) } else { None };
    if let Some(ev) = &mut events {
        ev.record(
            "train_start",
            None,
            [("samples".to_string(), raw.len() as f64), ("abnormal_fraction".to_string(), raw.abnormal_fraction())],
            [run.config_path().display().to_string()],
        )?;
    }
    let splits = make_splits(&raw, config.dataset.folds, config.seed)?;
    let mut summaries = Vec::new();
    for (k, split) in splits.into_iter().enumerate() {
        if !folds.contains(&k) {
            continue;
        }
        log::info!("fold {k}: training {} epochs", config.train.epochs);
        let s = train_fold(config, &run, &raw, k, split)?;
        log::info!("fold {k}: best validation weighted F1 {:?} at epoch {:?}", s.best_weighted_f1, s.best_epoch);
        summaries.push(s);
    }
    let summary_path: PathBuf = match only_fold {
        Some(k) => run.fold(k).root.join("train_summary.json"),
        None => run.root.join("train_summary.json"),
    };
    write_json(&summary_path, &summaries)?;
    if let Some(ev) = &mut events {
        ev.record("train_end", None, [], [summary_path.display().to_string()])?;
    }
    Ok(summaries)
}
