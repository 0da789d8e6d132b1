use std::path::{Path, PathBuf};

use anodae_core::data::Dataset;
use anodae_core::latent::interpolation_grid;
use anodae_core::metrics::{histogram_bins, write_histogram_csv, write_trajectory_csv};
use anodae_core::scoring::{l2_norm, latent_means};
use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use crate::detect::{select_checkpoint, CheckpointSelector};
use crate::evaluate::trajectory;
use crate::events::EventLog;
use crate::run::{load_model, read_validation_log, reconstructions, write_json, FoldData, RunDir};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub rows: usize,
    pub columns: Vec<String>,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub fold: usize,
    pub checkpoint: PathBuf,
    pub files: Vec<ManifestEntry>,
}

/// Header and row count of a CSV file, as written.
fn describe(dir: &Path, file: &str, description: &str) -> Result<ManifestEntry> {
    let mut r = csv::Reader::from_path(dir.join(file)).with_context(|| format!("reading back {file}"))?;
    let columns = r.headers()?.iter().map(String::from).collect();
    let rows = r.records().count();
    Ok(ManifestEntry { file: file.into(), rows, columns, description: description.into() })
}

/// Up to `n` samples alternating between classes, normal first.
fn pick_pairs(ds: &Dataset, n: usize) -> Vec<usize> {
    let (normal, abnormal): (Vec<usize>, Vec<usize>) = (0..ds.len()).partition(|&i| !ds.samples[i].label.is_abnormal());
    let mut out = Vec::with_capacity(n);
    let (mut a, mut b) = (normal.into_iter(), abnormal.into_iter());
    while out.len() < n {
        match (a.next(), b.next()) {
            (None, None) => break,
            (x, y) => out.extend(x.into_iter().chain(y).take(n - out.len())),
        }
    }
    out
}

pub fn export_fold(run: &RunDir, raw: &Dataset, fold: usize, selector: CheckpointSelector) -> Result<Manifest> {
    let config = run.load_config()?;
    let dir = run.fold(fold);
    let data = FoldData::load(raw, &dir)?;
    let selected = select_checkpoint(&dir, selector)?;
    let model = load_model(&selected.path)?;
    let out = dir.plots();
    std::fs::create_dir_all(&out)?;
    let seq_len = data.validation.seq_len;
    let mut files = Vec::new();

    let picks = pick_pairs(&data.validation, config.export.reconstruction_pairs);
    let subset = data.validation.subset(&picks)?;
    let recon = reconstructions(&model, &subset)?;
    let mut w = csv::Writer::from_path(out.join("reconstruction_pairs.csv"))?;
    let header: Vec<String> = (0..seq_len).map(|i| format!("real_{i}")).chain((0..seq_len).map(|i| format!("recon_{i}"))).collect();
    w.write_record(&header)?;
    for (s, r) in subset.samples.iter().zip(&recon) {
        w.write_record(s.values.iter().chain(r).map(f64::to_string))?;
    }
    w.flush()?;
    files.push(describe(&out, "reconstruction_pairs.csv", "validation series followed by their reconstructions, one sample per row")?);
    let mut w = csv::Writer::from_path(out.join("reconstruction_pairs_index.csv"))?;
    w.write_record(["row", "sample_id", "label"])?;
    for (i, s) in subset.samples.iter().enumerate() {
        w.write_record([i.to_string(), s.source_id.clone(), s.label.as_u8().to_string()])?;
    }
    w.flush()?;
    files.push(describe(&out, "reconstruction_pairs_index.csv", "sample id and label of each reconstruction_pairs row")?);

    for (name, ds) in [("train", &data.train), ("validation", &data.validation)] {
        let norms: Vec<f64> = latent_means(&model, ds)?.iter().map(|z| l2_norm(z)).collect();
        let file = format!("latent_norms_{name}.csv");
        write_histogram_csv(out.join(&file), &histogram_bins(&norms, config.export.histogram_bins))?;
        files.push(describe(&out, &file, &format!("histogram of posterior-mean norms on the {name} split"))?);
    }

    let records = read_validation_log(&dir)?;
    if let Some(t) = trajectory(&config, &dir, &records)? {
        write_trajectory_csv(out.join("lambda_trajectory.csv"), &t)?;
        files.push(describe(&out, "lambda_trajectory.csv", "optimal linear weights and threshold per validation epoch")?);
    }

    if let Some(first) = data.validation.samples.iter().find(|s| !s.label.is_abnormal()) {
        let grid = interpolation_grid(
            &model,
            &first.values,
            &config.export.interpolation_dims,
            config.export.interpolation_radius,
            config.export.interpolation_steps,
        )?;
        grid.write_csv(out.join("interpolation_grid.csv"))?;
        files.push(describe(&out, "interpolation_grid.csv", "decoded sequences along single latent axes around a normal sample")?);
    }

    let manifest = Manifest { version: MANIFEST_VERSION, fold, checkpoint: selected.path, files };
    write_json(&out.join("manifest.json"), &manifest)?;
    EventLog::open(dir.events())?.record(
        "export_plots",
        Some(fold),
        [("files".to_string(), manifest.files.len() as f64)],
        manifest.files.iter().map(|f| out.join(&f.file).display().to_string()),
    )?;
    Ok(manifest)
}

pub fn cmd_export_plots(run_dir: &Path, only_fold: Option<usize>, selector: Option<CheckpointSelector>) -> Result<Vec<Manifest>> {
    let run = RunDir::new(run_dir);
    let config = run.load_config()?;
    let folds = run.folds(&config, only_fold)?;
    let selector = selector.unwrap_or(CheckpointSelector::Policy(config.detect.checkpoint));
    let raw = crate::run::load_dataset(&config)?;
    folds.into_iter().map(|k| export_fold(&run, &raw, k, selector)).collect()
}
