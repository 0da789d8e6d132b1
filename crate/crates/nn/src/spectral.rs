//! Spectral normalization by power iteration.
//!
//! A weight is viewed as a `rows x cols` matrix (output features by
//! everything else). The top singular value is estimated as `u^T W v` with
//! persistent singular-vector estimates `u` and `v`, and the weight used in
//! the forward pass is `W / sigma`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::tensor::gemm;

/// Lower bound on the singular value estimate.
pub const SIGMA_EPS: f64 = 1e-12;

/// Persistent power-iteration state of one normalized weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralState {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    /// Power iterations per training forward pass.
    pub n_iter: usize,
}

impl SpectralState {
    /// Random unit `u`, then `warmup` power iterations against `weight`.
    pub fn init<R: Rng + ?Sized>(
        weight: &[f64],
        rows: usize,
        cols: usize,
        n_iter: usize,
        warmup: usize,
        rng: &mut R,
    ) -> Self {
        let mut u = random_unit(rows, rng);
        let mut v = vec![0.0; cols];
        power_iterate(weight, rows, cols, &mut u, &mut v, warmup.max(1));
        Self { u, v, n_iter }
    }

    pub fn refresh(&mut self, weight: &[f64], rows: usize, cols: usize) {
        power_iterate(weight, rows, cols, &mut self.u, &mut self.v, self.n_iter);
    }

    /// Power-iterates until the estimate grows by less than `tol` (relative)
    /// in one iteration, or `max_iter` iterations have run. Returns the
    /// iteration count.
    pub fn converge(&mut self, weight: &[f64], rows: usize, cols: usize, tol: f64, max_iter: usize) -> usize {
        let mut sigma = self.sigma(weight, rows, cols);
        for it in 1..=max_iter {
            power_iterate(weight, rows, cols, &mut self.u, &mut self.v, 1);
            let next = self.sigma(weight, rows, cols);
            if (next - sigma).abs() <= tol * next {
                return it;
            }
            sigma = next;
        }
        max_iter
    }

    /// `u^T W v`, clamped below by [`SIGMA_EPS`].
    pub fn sigma(&self, weight: &[f64], rows: usize, cols: usize) -> f64 {
        bilinear(weight, rows, cols, &self.u, &self.v).max(SIGMA_EPS)
    }

    /// Maps the gradient w.r.t. the normalized weight back to the raw weight:
    /// `(G - <G, W/sigma> u v^T) / sigma`.
    pub fn backward(&self, weight: &[f64], grad_normalized: &[f64], rows: usize, cols: usize) -> Vec<f64> {
        let sigma = self.sigma(weight, rows, cols);
        let inner: f64 = grad_normalized
            .iter()
            .zip(weight)
            .map(|(g, w)| g * w)
            .sum::<f64>()
            / sigma;
        let mut out = Vec::with_capacity(weight.len());
        for i in 0..rows {
            for j in 0..cols {
                let g = grad_normalized[i * cols + j];
                out.push((g - inner * self.u[i] * self.v[j]) / sigma);
            }
        }
        out
    }
}

/// Result of a standalone normalization call.
#[derive(Debug, Clone)]
pub struct SpectralOutput {
    pub normalized: Vec<f64>,
    pub sigma: f64,
}

/// Normalizes `weight` (`rows x cols`, row-major) by its power-iteration
/// estimate of the largest singular value after `n_iter` iterations.
///
/// `u_state` is created as a random unit vector when absent and is updated in
/// place so consecutive calls continue the iteration.
pub fn spectral_normalize<R: Rng + ?Sized>(
    weight: &[f64],
    rows: usize,
    cols: usize,
    u_state: &mut Option<Vec<f64>>,
    n_iter: usize,
    rng: &mut R,
) -> SpectralOutput {
    assert_eq!(weight.len(), rows * cols, "weight must be rows x cols");
    let mut u = match u_state.take() {
        Some(u) if u.len() == rows => u,
        _ => random_unit(rows, rng),
    };
    let mut v = vec![0.0; cols];
    power_iterate(weight, rows, cols, &mut u, &mut v, n_iter.max(1));
    let sigma = bilinear(weight, rows, cols, &u, &v).max(SIGMA_EPS);
    *u_state = Some(u);
    SpectralOutput { normalized: weight.iter().map(|w| w / sigma).collect(), sigma }
}

fn random_unit<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let mut u: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    normalize(&mut u);
    u
}

fn normalize(x: &mut [f64]) {
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let denom = norm.max(SIGMA_EPS);
    for v in x.iter_mut() {
        *v /= denom;
    }
}

fn power_iterate(w: &[f64], rows: usize, cols: usize, u: &mut [f64], v: &mut [f64], iters: usize) {
    for _ in 0..iters {
        // v = normalize(W^T u)
        gemm(cols, rows, 1, 1.0, w, true, u, false, 0.0, v);
        normalize(v);
        // u = normalize(W v)
        gemm(rows, cols, 1, 1.0, w, false, v, false, 0.0, u);
        normalize(u);
    }
}

fn bilinear(w: &[f64], rows: usize, cols: usize, u: &[f64], v: &[f64]) -> f64 {
    let mut wv = vec![0.0; rows];
    gemm(rows, cols, 1, 1.0, w, false, v, false, 0.0, &mut wv);
    wv.iter().zip(u).map(|(a, b)| a * b).sum()
}
