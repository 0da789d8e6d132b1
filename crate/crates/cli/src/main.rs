use std::path::PathBuf;
use std::process::ExitCode;

use anodae_cli::config::{ExperimentConfig, OUTPUT_ROOT_ENV};
use anodae_cli::detect::CheckpointSelector;
use anodae_cli::{bench, detect, evaluate, exit, exit_code, export, train, RunDir, ValidationError};
use anyhow::Result;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "anodae", version, about = "Time-series anomaly detection experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Run directory; defaults to <output root>/<name> from --config.
    #[arg(long)]
    run_dir: Option<PathBuf>,
    /// Config used to locate the run directory.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    fold: Option<usize>,
    /// best, last or an epoch number.
    #[arg(long)]
    checkpoint: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Build splits and train every fold.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        run_dir: Option<PathBuf>,
        #[arg(long)]
        fold: Option<usize>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit composers on validation components and report on test.
    Detect(RunArgs),
    /// TSTR, latent-norm fit, trajectories and latent diagnostics.
    Evaluate(RunArgs),
    /// CSV bundle for plotting, with a manifest.
    ExportPlots(RunArgs),
    /// Time the linear grid search against SVM training.
    BenchmarkSearch {
        #[arg(long, default_value_t = 100_000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for the JSON report; the output root by default.
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
}

fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

impl RunArgs {
    fn resolve(&self) -> Result<(PathBuf, Option<CheckpointSelector>)> {
        let dir = match (&self.run_dir, &self.config) {
            (Some(d), _) => d.clone(),
            (None, Some(c)) => {
                let cfg = ExperimentConfig::load(c)?;
                cfg.output_root().join(&cfg.name)
            }
            (None, None) => return Err(ValidationError::new("--run-dir", "either --run-dir or --config is required").into()),
        };
        let selector = self.checkpoint.as_deref().map(str::parse).transpose()?;
        Ok((dir, selector))
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, run_dir, fold, seed } => {
            let cfg = ExperimentConfig::load(&config)?;
            let seed = seed.unwrap_or(cfg.seed);
            let cfg = cfg.with_seed(seed);
            let dir = run_dir.unwrap_or_else(|| cfg.output_root().join(&cfg.name));
            let summaries = train::cmd_train(&cfg, &dir, fold)?;
            println!("{}", serde_json::to_string_pretty(&summaries)?);
            println!("run directory: {}", dir.display());
        }
        Command::Detect(args) => {
            let (dir, selector) = args.resolve()?;
            for d in detect::cmd_detect(&dir, args.fold, selector)? {
                for (name, o) in &d.composers {
                    let m = &o.metrics;
                    let auroc = m.auroc.map_or("n/a".to_string(), |a| format!("{a:.4}"));
                    println!("fold {} {name:<14} F1 {:.4}  phi {:.4}  AUROC {auroc}", d.fold, m.weighted_f1, m.phi);
                }
            }
        }
        Command::Evaluate(args) => {
            let (dir, selector) = args.resolve()?;
            for e in evaluate::cmd_evaluate(&dir, args.fold, selector)? {
                let t = e.tstr.as_ref();
                println!(
                    "fold {}: TSTR {:?}  baseline {:?}  TSTR_N {:?}  ({} files)",
                    e.fold,
                    t.and_then(|t| t.tstr),
                    t.and_then(|t| t.baseline),
                    t.and_then(|t| t.tstr_n),
                    e.files.len()
                );
            }
        }
        Command::ExportPlots(args) => {
            let (dir, selector) = args.resolve()?;
            for m in export::cmd_export_plots(&dir, args.fold, selector)? {
                println!("fold {}: {} files in {}", m.fold, m.files.len(), RunDir::new(&dir).fold(m.fold).plots().display());
            }
        }
        Command::BenchmarkSearch { n, seed, run_dir } => {
            let out = run_dir.unwrap_or_else(|| output_root().join("benchmarks"));
            let report = bench::cmd_benchmark_search(n, seed, Some(&out))?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::VALIDATION as u8 } else { exit::OK as u8 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
