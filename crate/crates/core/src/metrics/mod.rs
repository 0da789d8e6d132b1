//! Classification metrics, chi goodness of fit, TSTR and composition
//! trajectories.

mod chi;
mod classification;
mod tstr;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use chi::{
    chi_cdf, chi_fit, chi_ln_pdf, histogram_bins, kolmogorov_sf, ks_pvalue, ks_statistic, mle_dof, read_histogram_csv,
    write_histogram_csv, ChiFitReport, HistogramBin, HISTOGRAM_BINS, MIN_NORMS,
};
pub use classification::{auroc, phi_coefficient, weighted_f1, Confusion, MetricsReport};
pub use tstr::{
    moving_average, train_and_score, tstr_measure, ClassifierConfig, CnnClassifier, TstrMeasurement, TstrReport,
};

use crate::composer::{grid_search_linear, LinearGrid, Objective};
use crate::error::{CoreError, Result};
use crate::scoring::ComponentNormalizer;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub epoch: usize,
    pub lambda: f64,
    pub gamma: f64,
    pub tau: f64,
    pub objective: f64,
}

/// Optimal linear composition per validation epoch. Each entry holds raw
/// `(r, d, l)` triples and labels; normalization is fitted per epoch.
pub fn lambda_trajectory(
    epochs: &[(usize, Vec<[f64; 3]>, Vec<bool>)],
    grid: &LinearGrid,
    objective: Objective,
) -> Result<Vec<TrajectoryPoint>> {
    if epochs.len() < 2 {
        return Err(CoreError::contract("a trajectory needs at least 2 validation epochs"));
    }
    epochs
        .iter()
        .map(|(epoch, raw, labels)| {
            let (normalizer, _) = ComponentNormalizer::fit(raw)?;
            let fit = grid_search_linear(&normalizer.apply(raw), labels, grid, objective)?;
            Ok(TrajectoryPoint { epoch: *epoch, lambda: fit.lambda, gamma: fit.gamma, tau: fit.tau, objective: fit.objective })
        })
        .collect()
}

pub fn write_trajectory_csv(path: impl AsRef<Path>, points: &[TrajectoryPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    for p in points {
        w.serialize(p)?;
    }
    w.flush().map_err(|e| CoreError::io(path.as_ref(), e))
}
