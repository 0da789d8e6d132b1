use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::metrics::{phi_coefficient, weighted_f1, Confusion};
use crate::scoring::linear_unchecked;

/// Slack on `lambda + gamma <= 1` for grids built from decimal steps.
const WEIGHT_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    #[default]
    WeightedF1,
    Phi,
}

impl Objective {
    pub fn eval(self, c: &Confusion) -> f64 {
        match self {
            Objective::WeightedF1 => weighted_f1(c),
            Objective::Phi => phi_coefficient(c),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TauGrid {
    /// Order statistics at `k / (m - 1)`, `k = 0..m`; every distinct score
    /// when there are at most `m` of them.
    Quantiles(usize),
    Values(Vec<f64>),
}

impl Default for TauGrid {
    fn default() -> Self {
        TauGrid::Quantiles(50)
    }
}

/// `{0, 0.01, ..., 1}`
pub fn percent_grid() -> Vec<f64> {
    (0..=100).map(|k| k as f64 / 100.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearGrid {
    pub lambdas: Vec<f64>,
    pub gammas: Vec<f64>,
    pub tau: TauGrid,
}

impl Default for LinearGrid {
    fn default() -> Self {
        Self { lambdas: percent_grid(), gammas: vec![0.0], tau: TauGrid::default() }
    }
}

impl LinearGrid {
    pub fn lambda_gamma() -> Self {
        Self { lambdas: percent_grid(), gammas: percent_grid(), tau: TauGrid::default() }
    }

    pub fn reconstruction_only() -> Self {
        Self { lambdas: vec![0.0], gammas: vec![0.0], tau: TauGrid::default() }
    }

    /// Valid `(lambda, gamma)` pairs in tie-break order.
    pub fn weight_pairs(&self) -> Vec<(f64, f64)> {
        let mut lambdas = self.lambdas.clone();
        let mut gammas = self.gammas.clone();
        lambdas.sort_by(f64::total_cmp);
        gammas.sort_by(f64::total_cmp);
        lambdas.dedup();
        gammas.dedup();
        let mut out = Vec::new();
        for &l in &lambdas {
            for &g in &gammas {
                if l >= 0.0 && g >= 0.0 && l + g <= 1.0 + WEIGHT_SLACK {
                    out.push((l, g));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub lambda: f64,
    pub gamma: f64,
    pub tau: f64,
    pub objective: f64,
    pub evaluations: usize,
}

/// Scores sorted ascending with the count of positives at or after each index.
pub struct SortedScores {
    scores: Vec<f64>,
    pos_from: Vec<usize>,
}

impl SortedScores {
    pub fn new(scores: &[f64], labels: &[bool]) -> Self {
        let mut pairs: Vec<(f64, bool)> = scores.iter().copied().zip(labels.iter().copied()).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut pos_from = vec![0usize; pairs.len() + 1];
        for i in (0..pairs.len()).rev() {
            pos_from[i] = pos_from[i + 1] + usize::from(pairs[i].1);
        }
        Self { scores: pairs.into_iter().map(|p| p.0).collect(), pos_from }
    }

    pub fn sorted(&self) -> &[f64] {
        &self.scores
    }

    /// Confusion of the rule "abnormal iff score > tau".
    pub fn confusion_above(&self, tau: f64) -> Confusion {
        let n = self.scores.len();
        let idx = self.scores.partition_point(|&s| s <= tau);
        let total_pos = self.pos_from[0];
        let tp = self.pos_from[idx];
        let fp = (n - idx) - tp;
        Confusion { tp, fp, fn_: total_pos - tp, tn: (n - total_pos) - fp }
    }

    pub fn tau_candidates(&self, grid: &TauGrid) -> Vec<f64> {
        let s = &self.scores;
        let mut out = match grid {
            TauGrid::Values(v) => {
                let mut v = v.clone();
                v.sort_by(f64::total_cmp);
                v
            }
            TauGrid::Quantiles(m) => {
                let mut distinct = s.clone();
                distinct.dedup();
                if distinct.len() <= *m || *m < 2 {
                    distinct
                } else {
                    let n = s.len();
                    (0..*m).map(|k| s[k * (n - 1) / (m - 1)]).collect()
                }
            }
        };
        out.dedup();
        out
    }
}

/// Best threshold on fixed scores; ties go to the smallest tau.
pub fn fit_threshold(scores: &[f64], labels: &[bool], grid: &TauGrid, objective: Objective) -> Result<(f64, f64, usize)> {
    let sorted = SortedScores::new(scores, labels);
    let candidates = sorted.tau_candidates(grid);
    best_threshold(&sorted, &candidates, objective).ok_or_else(|| CoreError::contract("empty threshold grid"))
}

fn best_threshold(sorted: &SortedScores, candidates: &[f64], objective: Objective) -> Option<(f64, f64, usize)> {
    let mut best: Option<(f64, f64)> = None;
    for &tau in candidates {
        let v = objective.eval(&sorted.confusion_above(tau));
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((tau, v));
        }
    }
    best.map(|(t, v)| (t, v, candidates.len()))
}

/// Exhaustive search over every valid `(lambda, gamma, tau)`; ties go to the
/// smallest lambda, then gamma, then tau.
pub fn grid_search_linear(points: &[[f64; 3]], labels: &[bool], grid: &LinearGrid, objective: Objective) -> Result<LinearFit> {
    if points.len() != labels.len() {
        return Err(CoreError::contract("points and labels differ in length"));
    }
    if points.is_empty() {
        return Err(CoreError::contract("grid search needs at least one sample"));
    }
    let pairs = grid.weight_pairs();
    let mut best: Option<LinearFit> = None;
    let mut evaluations = 0;
    let mut scores = vec![0.0; points.len()];
    for (lambda, gamma) in pairs {
        for (s, p) in scores.iter_mut().zip(points) {
            *s = linear_unchecked(p, lambda, gamma);
        }
        let sorted = SortedScores::new(&scores, labels);
        let candidates = sorted.tau_candidates(&grid.tau);
        if let Some((tau, value, n)) = best_threshold(&sorted, &candidates, objective) {
            evaluations += n;
            if best.is_none_or(|b| value > b.objective) {
                best = Some(LinearFit { lambda, gamma, tau, objective: value, evaluations: 0 });
            }
        }
    }
    let mut fit = best.ok_or_else(|| CoreError::contract("no valid (lambda, gamma, tau) in the grid"))?;
    fit.evaluations = evaluations;
    Ok(fit)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_sizes() {
        let g = LinearGrid::default();
        assert_eq!(g.weight_pairs().len(), 101);
        assert_eq!(LinearGrid::lambda_gamma().weight_pairs().len(), 101 * 102 / 2);
        let pts: Vec<[f64; 3]> = (0..1000).map(|i| [i as f64 / 1000.0, ((i * 7) % 13) as f64 / 13.0, 0.0]).collect();
        let labels: Vec<bool> = (0..1000).map(|i| i % 3 == 0).collect();
        let grid = LinearGrid { lambdas: (0..100).map(|k| k as f64 / 100.0).collect(), ..Default::default() };
        let fit = grid_search_linear(&pts, &labels, &grid, Objective::WeightedF1).unwrap();
        assert_eq!(fit.evaluations, 5000);
    }

    #[test]
    fn separable_reconstruction() {
        let mut pts = Vec::new();
        let mut labels = Vec::new();
        for i in 0..20 {
            pts.push([0.02 * i as f64, 0.5, 0.0]);
            labels.push(false);
            pts.push([0.5 + 0.02 * i as f64, 0.5, 0.0]);
            labels.push(true);
        }
        let grid = LinearGrid::reconstruction_only();
        let fit = grid_search_linear(&pts, &labels, &grid, Objective::WeightedF1).unwrap();
        assert_eq!((fit.lambda, fit.gamma), (0.0, 0.0));
        assert_eq!(fit.objective, 1.0);
        assert!((fit.tau - 0.38).abs() < 1e-12);
    }

    #[test]
    fn invalid_grid_is_rejected() {
        let grid = LinearGrid { lambdas: vec![0.8], gammas: vec![0.5], tau: TauGrid::Quantiles(5) };
        assert!(grid_search_linear(&[[0.0; 3]], &[true], &grid, Objective::WeightedF1).is_err());
    }

    #[test]
    fn threshold_above_everything_is_all_normal() {
        let s = SortedScores::new(&[0.1, 0.5, 0.9], &[false, true, true]);
        assert_eq!(s.confusion_above(1.0), Confusion { tp: 0, fp: 0, fn_: 2, tn: 1 });
        assert_eq!(s.confusion_above(0.1), Confusion { tp: 2, fp: 0, fn_: 0, tn: 1 });
    }
}
