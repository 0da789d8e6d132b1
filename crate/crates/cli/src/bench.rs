use std::path::Path;

use anodae_core::composer::{benchmark_search, synthetic_components, BenchmarkReport, FeatureSet, LinearGrid, SvmConfig};
use anyhow::Result;

use crate::config::ValidationError;
use crate::run::write_json;

/// Grid search against SVM training on `n` synthetic component triples.
pub fn cmd_benchmark_search(n: usize, seed: u64, out: Option<&Path>) -> Result<BenchmarkReport> {
    if n < 10 {
        return Err(ValidationError::new("--n", format!("need at least 10 samples, got {n}")).into());
    }
    let (points, labels) = synthetic_components(n, seed);
    let report = benchmark_search(&points, &labels, &LinearGrid::default(), FeatureSet::Rdl, &SvmConfig::default())?;
    if let Some(dir) = out {
        write_json(&dir.join(format!("benchmark-{n}-{seed}.json")), &report)?;
    }
    Ok(report)
}
