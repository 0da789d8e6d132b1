use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anodae_core::composer::{LinearGrid, Objective};
use anodae_core::data::Dataset;
use anodae_core::latent::{latent_extrema_trace, refine_latent, write_extrema_csv, RefinementTrace};
use anodae_core::metrics::{
    chi_fit, histogram_bins, lambda_trajectory, tstr_measure, write_histogram_csv, write_trajectory_csv, ChiFitReport,
    HistogramBin, TrajectoryPoint, TstrReport, MIN_NORMS,
};
use anodae_core::scoring::{empirical_mode, l2_norm, latent_means, raw_triples, read_components_csv, LTransform};
use anyhow::Result;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::detect::{select_checkpoint, CheckpointSelector};
use crate::events::EventLog;
use crate::run::{fold_seed, load_model, read_validation_log, reconstructions, write_json, FoldData, FoldDir, RunDir, ValidationRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LatentFitReport {
    Chi {
        /// dof fixed to the latent size
        hinted: ChiFitReport,
        fitted: ChiFitReport,
    },
    EmpiricalMode {
        n: usize,
        mode: f64,
        bins: usize,
        histogram: Vec<HistogramBin>,
    },
    Skipped {
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldEvaluation {
    pub fold: usize,
    pub checkpoint: PathBuf,
    pub tstr: Option<TstrReport>,
    pub latent_fit: LatentFitReport,
    pub trajectory: Option<Vec<TrajectoryPoint>>,
    pub files: Vec<PathBuf>,
}

/// Stratified halves of `dataset`: indices for training and for scoring.
pub fn stratified_halves(dataset: &Dataset, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut normal, mut abnormal): (Vec<usize>, Vec<usize>) =
        (0..dataset.len()).partition(|&i| !dataset.samples[i].label.is_abnormal());
    normal.shuffle(&mut rng);
    abnormal.shuffle(&mut rng);
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for class in [normal, abnormal] {
        let half = class.len() / 2;
        a.extend_from_slice(&class[..half]);
        b.extend_from_slice(&class[half..]);
    }
    (a, b)
}

/// TSTR over the most recent validation checkpoints. Each measurement
/// reshuffles the validation set into a training and a scoring half.
pub fn tstr_report(config: &ExperimentConfig, fold: usize, dir: &FoldDir, data: &FoldData, records: &[ValidationRecord]) -> Result<TstrReport> {
    let start = records.len().saturating_sub(config.evaluate.tstr_checkpoints);
    let mut measurements = Vec::new();
    for r in &records[start..] {
        let model = load_model(&dir.checkpoint(r.epoch))?;
        let seed = fold_seed(config.seed, fold) ^ (r.epoch as u64).wrapping_mul(0x2545_f491_4f6c_dd1d);
        let (a, b) = stratified_halves(&data.validation, seed);
        let recon = reconstructions(&model, &data.validation)?;
        let labels: Vec<bool> = data.validation.samples.iter().map(|s| s.label.is_abnormal()).collect();
        let real = |idx: &[usize]| -> Vec<Vec<f64>> { idx.iter().map(|&i| data.validation.samples[i].values.clone()).collect() };
        let synthetic: Vec<Vec<f64>> = a.iter().map(|&i| recon[i].clone()).collect();
        let la: Vec<bool> = a.iter().map(|&i| labels[i]).collect();
        let lb: Vec<bool> = b.iter().map(|&i| labels[i]).collect();
        let m = tstr_measure(r.epoch, &synthetic, &real(&a), &la, &real(&b), &lb, &config.evaluate.classifier, seed)?;
        log::info!("fold {fold} epoch {}: TSTR {:?}, baseline {:?}", r.epoch, m.tstr, m.baseline);
        measurements.push(m);
    }
    Ok(TstrReport::new(measurements, config.evaluate.tstr_window))
}

pub fn latent_fit_report(config: &ExperimentConfig, norms: &[f64]) -> Result<LatentFitReport> {
    if config.chi_fit_enabled() {
        if norms.len() < MIN_NORMS {
            return Ok(LatentFitReport::Skipped { reason: format!("{} latent norms, chi fit needs {MIN_NORMS}", norms.len()) });
        }
        return Ok(LatentFitReport::Chi {
            hinted: chi_fit(norms, Some(config.model.arch.latent_dim))?,
            fitted: chi_fit(norms, None)?,
        });
    }
    let bins = config.scoring.bins;
    match empirical_mode(norms, bins) {
        Ok(mode) => Ok(LatentFitReport::EmpiricalMode {
            n: norms.len(),
            mode,
            bins,
            histogram: histogram_bins(norms, config.export.histogram_bins),
        }),
        Err(e) => Ok(LatentFitReport::Skipped { reason: e.to_string() }),
    }
}

/// Optimal linear composition at every recorded validation epoch.
pub fn trajectory(config: &ExperimentConfig, dir: &FoldDir, records: &[ValidationRecord]) -> Result<Option<Vec<TrajectoryPoint>>> {
    if records.len() < 2 {
        return Ok(None);
    }
    let mut epochs = Vec::new();
    for r in records {
        let comps = read_components_csv(dir.validation_components(r.epoch))?;
        let labels = comps.iter().map(|c| c.is_abnormal().unwrap_or(false)).collect();
        epochs.push((r.epoch, raw_triples(&comps, LTransform::Absolute), labels));
    }
    let grid = match &config.detect.selection_composer {
        anodae_core::composer::ComposerSpec::Linear { grid, .. } => grid.clone(),
        _ => LinearGrid::default(),
    };
    Ok(Some(lambda_trajectory(&epochs, &grid, Objective::WeightedF1)?))
}

pub fn evaluate_fold(config: &ExperimentConfig, run: &RunDir, raw: &Dataset, fold: usize, selector: CheckpointSelector) -> Result<FoldEvaluation> {
    let dir = run.fold(fold);
    let data = FoldData::load(raw, &dir)?;
    let records = read_validation_log(&dir)?;
    let selected = select_checkpoint(&dir, selector)?;
    let model = load_model(&selected.path)?;
    let out = dir.evaluate();
    std::fs::create_dir_all(&out)?;
    let mut files = Vec::new();

    let tstr = if config.evaluate.tstr {
        let report = tstr_report(config, fold, &dir, &data, &records)?;
        let p = out.join("tstr.json");
        write_json(&p, &report)?;
        files.push(p);
        Some(report)
    } else {
        None
    };

    let norms: Vec<f64> = latent_means(&model, &data.train)?.iter().map(|z| l2_norm(z)).collect();
    let latent_fit = latent_fit_report(config, &norms)?;
    let p = out.join(match latent_fit {
        LatentFitReport::Chi { .. } => "chi_fit.json",
        _ => "empirical_mode.json",
    });
    write_json(&p, &latent_fit)?;
    files.push(p);
    let p = out.join("latent_norms_hist.csv");
    write_histogram_csv(&p, &histogram_bins(&norms, config.export.histogram_bins))?;
    files.push(p);

    let trajectory = if config.evaluate.trajectory { trajectory(config, &dir, &records)? } else { None };
    if let Some(t) = &trajectory {
        let p = out.join("trajectory.csv");
        write_trajectory_csv(&p, t)?;
        files.push(p);
    }

    let snapshots = records
        .iter()
        .map(|r| Ok((r.epoch, load_model(&dir.checkpoint(r.epoch))?)))
        .collect::<Result<Vec<_>>>()?;
    if !snapshots.is_empty() {
        let p = out.join("latent_extrema.csv");
        write_extrema_csv(&p, &latent_extrema_trace(&snapshots, &data.validation)?)?;
        files.push(p);
    }

    if let Some(cfg) = &config.evaluate.refine {
        let traces: Vec<RefinementTrace> = data
            .validation
            .samples
            .iter()
            .take(config.evaluate.refine_samples)
            .map(|s| refine_latent(&model, &s.values, cfg))
            .collect::<anodae_core::Result<_>>()?;
        let p = out.join("refinement.json");
        write_json(&p, &traces)?;
        files.push(p);
    }

    let evaluation = FoldEvaluation { fold, checkpoint: selected.path, tstr, latent_fit, trajectory, files };
    write_json(&out.join("report.json"), &evaluation)?;
    let mut metrics = BTreeMap::new();
    if let Some(t) = &evaluation.tstr {
        metrics.extend(t.tstr.map(|v| ("tstr".to_string(), v)));
        metrics.extend(t.baseline.map(|v| ("tstr_baseline".to_string(), v)));
        metrics.extend(t.tstr_n.map(|v| ("tstr_n".to_string(), v)));
    }
    if let LatentFitReport::Chi { hinted, .. } = &evaluation.latent_fit {
        metrics.insert("chi_p_value".into(), hinted.p_value);
    }
    EventLog::open(dir.events())?.record(
        "evaluate",
        Some(fold),
        metrics,
        evaluation.files.iter().map(|p| p.display().to_string()),
    )?;
    Ok(evaluation)
}

pub fn cmd_evaluate(run_dir: &Path, only_fold: Option<usize>, selector: Option<CheckpointSelector>) -> Result<Vec<FoldEvaluation>> {
    let run = RunDir::new(run_dir);
    let config = run.load_config()?;
    let folds = run.folds(&config, only_fold)?;
    let selector = selector.unwrap_or(CheckpointSelector::Policy(config.detect.checkpoint));
    let raw = crate::run::load_dataset(&config)?;
    folds.into_iter().map(|k| evaluate_fold(&config, &run, &raw, k, selector)).collect()
}
