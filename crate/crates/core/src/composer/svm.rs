//! Soft-margin RBF-kernel SVM trained by SMO with second-order working-set
//! selection.

use std::rc::Rc;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::grid::{Objective, SortedScores};
use crate::error::{CoreError, Result};

const TAU: f64 = 1e-12;
/// Points used for the median-distance bandwidth beyond which pairs are sampled.
const MEDIAN_SAMPLE: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSet {
    /// `(r, d)`
    Rd,
    /// `(r, d, l)`
    Rdl,
}

impl FeatureSet {
    pub fn dims(self) -> usize {
        match self {
            FeatureSet::Rd => 2,
            FeatureSet::Rdl => 3,
        }
    }

    pub fn project(self, t: &[f64; 3]) -> Vec<f64> {
        t[..self.dims()].to_vec()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SvmConfig {
    pub c: f64,
    /// RBF bandwidth; median pairwise distance when absent.
    pub sigma: Option<f64>,
    pub tol: f64,
    pub max_iter: usize,
    /// Per-class box bounds inversely proportional to class frequency.
    pub class_weighting: bool,
    /// Re-fit the decision threshold on the training decisions.
    pub calibrate: bool,
    pub cache_mb: usize,
}

impl Default for SvmConfig {
    fn default() -> Self {
        Self { c: 1.0, sigma: None, tol: 1e-3, max_iter: 100_000, class_weighting: true, calibrate: true, cache_mb: 256 }
    }
}

impl SvmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(CoreError::contract(format!("svm c must be positive, got {}", self.c)));
        }
        if let Some(s) = self.sigma {
            if !(s > 0.0 && s.is_finite()) {
                return Err(CoreError::contract(format!("svm sigma must be positive, got {s}")));
            }
        }
        if !(self.tol > 0.0) || self.max_iter == 0 {
            return Err(CoreError::contract("svm tol and max_iter must be positive"));
        }
        Ok(())
    }
}

pub fn rbf(a: &[f64], b: &[f64], sigma: f64) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (-d2 / (2.0 * sigma * sigma)).exp()
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Median distance over all pairs (or over pairs of a seeded subsample of
/// 2000 points); falls back to 1 when that median is 0.
pub fn median_pairwise_distance(points: &[Vec<f64>]) -> f64 {
    let idx: Vec<usize> = if points.len() > MEDIAN_SAMPLE {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        sample(&mut rng, points.len(), MEDIAN_SAMPLE).into_vec()
    } else {
        (0..points.len()).collect()
    };
    let mut d = Vec::with_capacity(idx.len() * idx.len().saturating_sub(1) / 2);
    for (a, &i) in idx.iter().enumerate() {
        for &j in &idx[a + 1..] {
            d.push(distance(&points[i], &points[j]));
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    let mid = d.len() / 2;
    let (_, m, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    if *m > 0.0 { *m } else { 1.0 }
}

/// LRU cache of kernel rows.
struct KernelRows<'a> {
    x: &'a [Vec<f64>],
    sigma: f64,
    rows: Vec<Option<Rc<Vec<f64>>>>,
    last_used: Vec<u64>,
    cached: Vec<usize>,
    capacity: usize,
    clock: u64,
}

impl<'a> KernelRows<'a> {
    fn new(x: &'a [Vec<f64>], sigma: f64, cache_bytes: usize) -> Self {
        let n = x.len();
        let capacity = (cache_bytes / (8 * n.max(1))).clamp(2, n.max(2));
        Self { x, sigma, rows: vec![None; n], last_used: vec![0; n], cached: Vec::new(), capacity, clock: 0 }
    }

    fn row(&mut self, i: usize) -> Rc<Vec<f64>> {
        self.clock += 1;
        self.last_used[i] = self.clock;
        if let Some(r) = &self.rows[i] {
            return Rc::clone(r);
        }
        if self.cached.len() >= self.capacity {
            let (pos, _) = self.cached.iter().enumerate().min_by_key(|(_, &k)| self.last_used[k]).expect("non-empty cache");
            let evict = self.cached.swap_remove(pos);
            self.rows[evict] = None;
        }
        let xi = &self.x[i];
        let r = Rc::new(self.x.iter().map(|xj| rbf(xi, xj, self.sigma)).collect::<Vec<_>>());
        self.rows[i] = Some(Rc::clone(&r));
        self.cached.push(i);
        r
    }
}

/// Dual solution: `alpha` for every training point and the decision
/// function `sum_i alpha_i y_i K(x_i, x) - rho`.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoSolution {
    pub alpha: Vec<f64>,
    pub rho: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Final `m(alpha) - M(alpha)`.
    pub violation: f64,
}

/// Solves `min 1/2 a'Qa - e'a` s.t. `y'a = 0`, `0 <= a_i <= upper_i`, with
/// `Q_ij = y_i y_j K(x_i, x_j)`.
pub fn solve_smo(x: &[Vec<f64>], y: &[f64], upper: &[f64], sigma: f64, tol: f64, max_iter: usize, cache_bytes: usize) -> SmoSolution {
    let n = x.len();
    let mut alpha = vec![0.0; n];
    let mut grad = vec![-1.0; n];
    let mut kernel = KernelRows::new(x, sigma, cache_bytes);
    let is_upper = |a: &[f64], t: usize| a[t] >= upper[t];
    let is_lower = |a: &[f64], t: usize| a[t] <= 0.0;

    let mut iterations = 0;
    let mut converged = false;
    let mut violation = f64::INFINITY;
    while iterations < max_iter {
        // i maximizes -y_t G_t over I_up
        let mut gmax = f64::NEG_INFINITY;
        let mut i = usize::MAX;
        for t in 0..n {
            if y[t] > 0.0 {
                if !is_upper(&alpha, t) && -grad[t] >= gmax {
                    gmax = -grad[t];
                    i = t;
                }
            } else if !is_lower(&alpha, t) && grad[t] >= gmax {
                gmax = grad[t];
                i = t;
            }
        }
        let Some(k_i) = (i != usize::MAX).then(|| kernel.row(i)) else {
            violation = 0.0;
            converged = true;
            break;
        };
        // j minimizes the second-order decrease over I_low
        let mut gmax2 = f64::NEG_INFINITY;
        let mut obj_min = f64::INFINITY;
        let mut j = usize::MAX;
        for t in 0..n {
            let candidate = if y[t] > 0.0 {
                (!is_lower(&alpha, t)).then(|| {
                    gmax2 = gmax2.max(grad[t]);
                    gmax + grad[t]
                })
            } else {
                (!is_upper(&alpha, t)).then(|| {
                    gmax2 = gmax2.max(-grad[t]);
                    gmax - grad[t]
                })
            };
            if let Some(diff) = candidate.filter(|&d| d > 0.0) {
                let quad = 2.0 - 2.0 * k_i[t];
                let obj = -(diff * diff) / if quad > 0.0 { quad } else { TAU };
                if obj <= obj_min {
                    obj_min = obj;
                    j = t;
                }
            }
        }
        violation = gmax + gmax2;
        if violation < tol || j == usize::MAX {
            converged = true;
            break;
        }
        iterations += 1;
        let k_j = kernel.row(j);
        let (old_i, old_j) = (alpha[i], alpha[j]);
        let (ci, cj) = (upper[i], upper[j]);
        let quad = {
            let q = 2.0 - 2.0 * k_i[j];
            if q > 0.0 { q } else { TAU }
        };
        if y[i] != y[j] {
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > ci - cj {
                if alpha[i] > ci {
                    alpha[i] = ci;
                    alpha[j] = ci - diff;
                }
            } else if alpha[j] > cj {
                alpha[j] = cj;
                alpha[i] = cj + diff;
            }
        } else {
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > ci {
                if alpha[i] > ci {
                    alpha[i] = ci;
                    alpha[j] = sum - ci;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > cj {
                if alpha[j] > cj {
                    alpha[j] = cj;
                    alpha[i] = sum - cj;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }
        let di = (alpha[i] - old_i) * y[i];
        let dj = (alpha[j] - old_j) * y[j];
        for t in 0..n {
            grad[t] += y[t] * (k_i[t] * di + k_j[t] * dj);
        }
    }

    // rho: mean of y G over free vectors, else the midpoint of the feasible range
    let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut free, mut sum_free) = (0usize, 0.0);
    for t in 0..n {
        let yg = y[t] * grad[t];
        if is_upper(&alpha, t) {
            if y[t] < 0.0 { ub = ub.min(yg) } else { lb = lb.max(yg) }
        } else if is_lower(&alpha, t) {
            if y[t] > 0.0 { ub = ub.min(yg) } else { lb = lb.max(yg) }
        } else {
            free += 1;
            sum_free += yg;
        }
    }
    let rho = if free > 0 { sum_free / free as f64 } else { (ub + lb) / 2.0 };
    SmoSolution { alpha, rho, converged, iterations, violation }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmModel {
    pub feature_set: FeatureSet,
    pub support_vectors: Vec<Vec<f64>>,
    /// `alpha_i * y_i` per support vector.
    pub dual_coef: Vec<f64>,
    pub bias: f64,
    /// Subtracted from the raw decision value before the sign test.
    pub threshold_shift: f64,
    pub sigma: f64,
    pub c: f64,
    /// Box bound multipliers for (normal, abnormal).
    pub class_weights: [f64; 2],
    pub converged: bool,
    pub iterations: usize,
}

impl SvmModel {
    pub fn raw_decision(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.feature_set.dims() {
            return Err(CoreError::contract(format!(
                "feature set {:?} expects {} features, got {}",
                self.feature_set,
                self.feature_set.dims(),
                x.len()
            )));
        }
        let s: f64 = self.support_vectors.iter().zip(&self.dual_coef).map(|(sv, a)| a * rbf(sv, x, self.sigma)).sum();
        Ok(s + self.bias)
    }

    /// Signed decision value; positive means abnormal.
    pub fn decision(&self, x: &[f64]) -> Result<f64> {
        Ok(self.raw_decision(x)? - self.threshold_shift)
    }
}

/// Box bound multipliers `[normal, abnormal]`, inverse to class frequency
/// and scaled so the larger is 1.
pub fn class_weights(labels: &[bool]) -> [f64; 2] {
    let pos = labels.iter().filter(|&&l| l).count() as f64;
    let neg = labels.len() as f64 - pos;
    let (wn, wp) = (1.0 / neg, 1.0 / pos);
    let m = wn.max(wp);
    [wn / m, wp / m]
}

pub fn svm_train(points: &[Vec<f64>], labels: &[bool], feature_set: FeatureSet, config: &SvmConfig) -> Result<SvmModel> {
    config.validate()?;
    if points.len() != labels.len() {
        return Err(CoreError::contract("points and labels differ in length"));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    if pos < 2 || labels.len() - pos < 2 {
        return Err(CoreError::contract(format!(
            "svm needs at least 2 samples per class, got {} normal and {pos} abnormal",
            labels.len() - pos
        )));
    }
    if let Some(p) = points.iter().find(|p| p.len() != feature_set.dims() || p.iter().any(|v| !v.is_finite())) {
        return Err(CoreError::contract(format!("bad svm input point {p:?} for feature set {feature_set:?}")));
    }
    let sigma = config.sigma.unwrap_or_else(|| median_pairwise_distance(points));
    let weights = if config.class_weighting { class_weights(labels) } else { [1.0, 1.0] };
    let y: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { -1.0 }).collect();
    let upper: Vec<f64> = labels.iter().map(|&l| config.c * weights[usize::from(l)]).collect();
    let sol = solve_smo(points, &y, &upper, sigma, config.tol, config.max_iter, config.cache_mb << 20);

    let mut support_vectors = Vec::new();
    let mut dual_coef = Vec::new();
    for (t, &a) in sol.alpha.iter().enumerate() {
        if a > 0.0 {
            support_vectors.push(points[t].clone());
            dual_coef.push(a * y[t]);
        }
    }
    if support_vectors.is_empty() {
        return Err(CoreError::contract("svm produced no support vectors"));
    }
    let mut model = SvmModel {
        feature_set,
        support_vectors,
        dual_coef,
        bias: -sol.rho,
        threshold_shift: 0.0,
        sigma,
        c: config.c,
        class_weights: weights,
        converged: sol.converged,
        iterations: sol.iterations,
    };
    if config.calibrate {
        let raw: Vec<f64> = points.iter().map(|p| model.raw_decision(p)).collect::<Result<_>>()?;
        model.threshold_shift = calibrate_shift(&raw, labels, Objective::WeightedF1);
    }
    Ok(model)
}

/// Threshold on raw decisions maximizing the objective; ties go to the
/// candidate closest to 0, so an optimal sign rule is kept as is.
pub fn calibrate_shift(raw: &[f64], labels: &[bool], objective: Objective) -> f64 {
    let sorted = SortedScores::new(raw, labels);
    let s = sorted.sorted();
    let mut candidates = vec![0.0, s[0] - 1.0];
    candidates.extend(s.windows(2).filter(|w| w[1] > w[0]).map(|w| 0.5 * (w[0] + w[1])));
    let mut best = (f64::NEG_INFINITY, 0.0f64);
    for &c in &candidates {
        let v = objective.eval(&sorted.confusion_above(c));
        if v > best.0 || (v == best.0 && c.abs() < best.1.abs()) {
            best = (v, c);
        }
    }
    best.1
}
