use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;

use anodae_cli::config::{CheckpointPolicy, ExperimentConfig};
use anodae_cli::detect::{detect_in_memory, CheckpointSelector, ComposerOutcome};
use anodae_cli::evaluate::{cmd_evaluate, latent_fit_report, LatentFitReport};
use anodae_cli::events::read_events;
use anodae_cli::export::{cmd_export_plots, Manifest};
use anodae_cli::run::{load_dataset, read_json};
use anodae_cli::train::cmd_train;
use anodae_cli::{detect, RunDir};
use anodae_core::composer::{Composition, CompositionModel};
use anodae_core::metrics::{read_histogram_csv, TstrReport};
use anodae_core::scoring::read_components_csv;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TINY: &str = r#"
name = "tiny"
seed = 5

[dataset]
seq_len = 32
folds = 2
source = { kind = "synthetic", normal = 240, abnormal = 60, seq_len = 32 }

[model]
variant = "anodae"
arch = { seq_len = 32, latent_dim = 4, channels = [4, 8], disc_channels = [4, 8] }

[train]
epochs = 6
batch_size = 16
validate_every = 1

[evaluate]
classifier = { epochs = 2, channels = [4, 8] }
refine = { max_steps = 10 }
"#;

fn tiny() -> ExperimentConfig {
    ExperimentConfig::from_toml(TINY).unwrap()
}

struct Shared {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

/// One full train, detect, evaluate and export pass shared by the tests.
fn shared() -> &'static Path {
    static RUN: OnceLock<Shared> = OnceLock::new();
    &RUN.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("tiny");
        cmd_train(&tiny(), &root, None).unwrap();
        detect::cmd_detect(&root, None, None).unwrap();
        cmd_evaluate(&root, None, None).unwrap();
        cmd_export_plots(&root, None, None).unwrap();
        Shared { _dir: dir, root }
    })
    .root
}

#[test]
fn run_directory_layout() {
    let run = RunDir::new(shared());
    for p in [run.config_path(), run.events_path(), run.root.join("train_summary.json"), run.root.join("detect_summary.json")] {
        assert!(p.is_file(), "missing {}", p.display());
    }
    for k in 0..2 {
        let f = run.fold(k);
        for p in [f.split(), f.normalization(), f.losses(), f.epochs(), f.validation_log(), f.events(), f.last_checkpoint()] {
            assert!(p.is_file(), "missing {}", p.display());
        }
        for e in 1..=6 {
            assert!(f.checkpoint(e).is_file());
            assert!(f.validation_components(e).is_file());
        }
        for name in ["lambda0", "lambda_grid", "svm_lambda", "svm_gamma"] {
            assert!(f.detect().join("composers").join(format!("{name}.json")).is_file());
            assert!(f.detect().join("reports").join(format!("{name}.json")).is_file());
        }
        for file in ["selection.json", "components_validation.csv", "components_test.csv", "summary.json"] {
            assert!(f.detect().join(file).is_file(), "missing detect/{file}");
        }
    }
}

#[test]
fn events_are_valid_and_strictly_increasing() {
    let run = RunDir::new(shared());
    let mut logs = vec![run.events_path()];
    logs.extend((0..2).map(|k| run.fold(k).events()));
    for path in logs {
        let text = std::fs::read_to_string(&path).unwrap();
        for line in text.lines() {
            serde_json::from_str::<serde_json::Value>(line).unwrap();
        }
        let events = read_events(&path).unwrap();
        assert!(!events.is_empty());
        assert!(events.windows(2).all(|w| w[0].timestamp_us < w[1].timestamp_us), "{}", path.display());
        assert!(events.iter().all(|e| e.metrics.values().all(|v| v.is_finite())));
    }
    let phases: BTreeSet<String> = read_events(&run.fold(0).events()).unwrap().into_iter().map(|e| e.phase).collect();
    for p in ["detect", "evaluate", "export_plots"] {
        assert!(phases.contains(p), "no {p} event in {phases:?}");
    }
}

fn last_losses(path: &Path) -> Vec<f64> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let last = r.records().map(Result::unwrap).last().unwrap();
    last.iter().filter_map(|v| v.parse::<f64>().ok()).collect()
}

#[test]
fn training_reruns_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    cmd_train(&tiny(), dir.path(), Some(0)).unwrap();
    let fresh = last_losses(&RunDir::new(dir.path()).fold(0).losses());
    let shared = last_losses(&RunDir::new(shared()).fold(0).losses());
    assert_eq!(fresh.len(), shared.len());
    for (a, b) in fresh.iter().zip(&shared) {
        assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
    }
}

#[test]
fn persisted_config_reloads_equal() {
    assert_eq!(RunDir::new(shared()).load_config().unwrap(), tiny());
}

#[test]
fn lambda0_is_a_reconstruction_threshold() {
    let fold = RunDir::new(shared()).fold(1);
    let model = CompositionModel::load(fold.detect().join("composers/lambda0.json")).unwrap();
    let Composition::Linear { lambda, gamma, tau } = model.composition else { panic!("lambda0 is linear") };
    assert_eq!((lambda, gamma), (0.0, 0.0));
    let (lo, hi) = (model.normalizer.min[0], model.normalizer.max[0]);
    let test = read_components_csv(fold.detect().join("components_test.csv")).unwrap();
    let outcome: ComposerOutcome = read_json(&fold.detect().join("reports/lambda0.json")).unwrap();
    assert_eq!(outcome.decisions.predicted.len(), test.len());
    for (c, &p) in test.iter().zip(&outcome.decisions.predicted) {
        let r = ((c.r - lo) / (hi - lo)).clamp(0.0, 1.0);
        assert_eq!(p, r > tau, "sample {}", c.sample_id);
    }
}

#[test]
fn svm_reports_cover_the_test_split() {
    let fold = RunDir::new(shared()).fold(0);
    let test = read_components_csv(fold.detect().join("components_test.csv")).unwrap();
    for name in ["svm_lambda", "svm_gamma"] {
        let model = CompositionModel::load(fold.detect().join(format!("composers/{name}.json"))).unwrap();
        assert!(matches!(model.composition, Composition::Svm(_)));
        let outcome: ComposerOutcome = read_json(&fold.detect().join(format!("reports/{name}.json"))).unwrap();
        assert_eq!(outcome.decisions.scores.len(), test.len());
        assert!((0.0..=1.0).contains(&outcome.metrics.weighted_f1));
    }
}

fn composer_json(fitted: &detect::Fitted) -> String {
    serde_json::to_string(fitted.models()).unwrap()
}

#[test]
fn test_labels_never_reach_the_composers() {
    let config = tiny();
    let fold = RunDir::new(shared()).fold(0);
    let raw = load_dataset(&config).unwrap();
    let last = CheckpointSelector::Policy(CheckpointPolicy::Last);
    let (data, _, _, fitted) = detect_in_memory(&config, &fold, &raw, last).unwrap();
    let mut labels: Vec<_> = data.split.test_idx.iter().map(|&i| raw.samples[i].label).collect();
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(1));
    let mut permuted = raw.clone();
    for (&i, &l) in data.split.test_idx.iter().zip(&labels) {
        permuted.samples[i].label = l;
    }
    assert_ne!(permuted, raw);
    let (_, _, _, again) = detect_in_memory(&config, &fold, &permuted, last).unwrap();
    assert_eq!(composer_json(&again), composer_json(&fitted));
}

#[test]
fn evaluate_outputs_parse_back() {
    let run = RunDir::new(shared());
    for k in 0..2 {
        let out = run.fold(k).evaluate();
        let tstr: TstrReport = read_json(&out.join("tstr.json")).unwrap();
        assert_eq!(tstr.window, 5);
        assert_eq!(tstr.measurements.len(), 5);
        assert_eq!(tstr.measurements.last().unwrap().epoch, 6);
        let fit: LatentFitReport = read_json(&out.join("chi_fit.json")).unwrap();
        assert!(matches!(fit, LatentFitReport::Chi { .. }), "{fit:?}");
        assert!(!out.join("empirical_mode.json").exists());
        for file in ["latent_norms_hist.csv", "trajectory.csv", "latent_extrema.csv", "refinement.json", "report.json"] {
            assert!(out.join(file).is_file(), "missing evaluate/{file}");
        }
    }
}

#[test]
fn without_kl_the_latent_report_is_empirical() {
    let mut config = tiny();
    config.train.beta_raw = 0.0;
    let norms: Vec<f64> = (0..500).map(|i| 1.0 + (i % 50) as f64 / 25.0).collect();
    assert!(matches!(latent_fit_report(&config, &norms).unwrap(), LatentFitReport::EmpiricalMode { .. }));
    config.train.beta_raw = 1e-4;
    assert!(matches!(latent_fit_report(&config, &norms).unwrap(), LatentFitReport::Chi { .. }));
}

#[test]
fn manifest_describes_every_plot_file() {
    let run = RunDir::new(shared());
    let plots = run.fold(0).plots();
    let manifest: Manifest = read_json(&plots.join("manifest.json")).unwrap();
    let listed: BTreeSet<String> = manifest.files.iter().map(|f| f.file.clone()).collect();
    let on_disk: BTreeSet<String> = std::fs::read_dir(&plots)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n != "manifest.json")
        .collect();
    assert_eq!(listed, on_disk);
    for entry in &manifest.files {
        let mut r = csv::Reader::from_path(plots.join(&entry.file)).unwrap();
        let header: Vec<String> = r.headers().unwrap().iter().map(String::from).collect();
        assert_eq!(header, entry.columns, "{}", entry.file);
        assert_eq!(r.records().count(), entry.rows, "{}", entry.file);
    }
    let pairs = manifest.files.iter().find(|f| f.file == "reconstruction_pairs.csv").unwrap();
    assert_eq!(pairs.columns.len(), 2 * 32);
    assert_eq!(pairs.rows, 16);
}

#[test]
fn latent_histogram_counts_the_training_split() {
    let run = RunDir::new(shared());
    let fold = run.fold(0);
    let config = tiny();
    let raw = load_dataset(&config).unwrap();
    let data = anodae_cli::run::FoldData::load(&raw, &fold).unwrap();
    let bins = read_histogram_csv(fold.plots().join("latent_norms_train.csv")).unwrap();
    assert_eq!(bins.len(), config.export.histogram_bins);
    assert_eq!(bins.iter().map(|b| b.count).sum::<usize>(), data.train.len());
    assert!(bins.windows(2).all(|w| w[0].center < w[1].center));
}

fn anodae(args: &[&str], envs: &[(&str, &Path)]) -> (i32, String) {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_anodae"));
    cmd.args(args).env("RUST_LOG", "error");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    let out = cmd.output().unwrap();
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stderr).into_owned())
}

#[test]
fn binary_exit_codes() {
    let run = shared().to_str().unwrap();
    assert_eq!(anodae(&["--help"], &[]).0, 0);
    assert_eq!(anodae(&["train", "--bogus"], &[]).0, 1);
    assert_eq!(anodae(&["train", "--config", "/nonexistent/config.toml"], &[]).0, 1);
    assert_eq!(anodae(&["detect", "--run-dir", run, "--fold", "7"], &[]).0, 1);
    assert_eq!(anodae(&["detect", "--run-dir", run, "--checkpoint", "soon"], &[]).0, 1);
    let (code, err) = anodae(&["detect", "--run-dir", run, "--fold", "0", "--checkpoint", "999"], &[]);
    assert_eq!(code, 2);
    assert!(err.contains("epoch-0999.ckpt"), "{err}");
    assert_eq!(anodae(&["benchmark-search", "--n", "3"], &[]).0, 1);

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, TINY.replace("folds = 2", "folds = 1")).unwrap();
    let (code, err) = anodae(&["train", "--config", bad.to_str().unwrap()], &[]);
    assert_eq!(code, 1);
    assert!(err.contains("dataset.folds"), "{err}");
}

#[test]
fn output_root_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("quick.toml");
    let text = TINY
        .replace("name = \"tiny\"", "name = \"quick\"")
        .replace("normal = 240, abnormal = 60", "normal = 60, abnormal = 20")
        .replace("epochs = 6", "epochs = 1");
    std::fs::write(&cfg, text).unwrap();
    let root = dir.path().join("elsewhere");
    let (code, err) = anodae(&["train", "--config", cfg.to_str().unwrap(), "--fold", "1"], &[("ANODAE_OUTPUT_ROOT", &root)]);
    assert_eq!(code, 0, "{err}");
    assert!(root.join("quick/config.toml").is_file());
    assert!(root.join("quick/fold-1/last.ckpt").is_file() || root.join("quick/fold-1/checkpoints/last.ckpt").is_file());
    assert!(!root.join("quick/fold-0").exists());
}

#[test]
fn reproduction_config_parses() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/mitbih.toml");
    let c = ExperimentConfig::load(&path).unwrap();
    assert_eq!(c.dataset.folds, 5);
    assert_eq!(c.train.batch_size, 256);
    assert_eq!(c.model.arch.latent_dim, 6);
    assert_eq!(c.train.epochs, 500);
}
