use std::f64::consts::{LN_2, PI};
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::function::gamma::{gamma_lr, ln_gamma};

use crate::error::{CoreError, Result};
use crate::scoring::histogram;

pub const MIN_NORMS: usize = 100;
pub const HISTOGRAM_BINS: usize = 50;
const DOF_RANGE: (f64, f64) = (1e-2, 1e3);

/// CDF of the chi distribution: `P(k/2, x^2/2)`.
pub fn chi_cdf(x: f64, dof: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        gamma_lr(dof / 2.0, x * x / 2.0)
    }
}

pub fn chi_ln_pdf(x: f64, dof: f64) -> f64 {
    (dof - 1.0) * x.ln() - x * x / 2.0 - (dof / 2.0 - 1.0) * LN_2 - ln_gamma(dof / 2.0)
}

/// One-sample KS statistic of `samples` against `cdf`.
pub fn ks_statistic(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    s.iter().enumerate().fold(0.0, |d, (i, &x)| {
        let f = cdf(x);
        d.max(f - i as f64 / n).max((i + 1) as f64 / n - f)
    })
}

/// Survival function of the Kolmogorov distribution.
pub fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    if lambda < 1.18 {
        // Jacobi-transformed form converges fast for small lambda
        let c = -PI * PI / (8.0 * lambda * lambda);
        let s: f64 = (1..=20).map(|j| ((2 * j - 1) as f64).powi(2)).map(|m| (c * m).exp()).sum();
        (1.0 - (2.0 * PI).sqrt() / lambda * s).clamp(0.0, 1.0)
    } else {
        let mut s = 0.0;
        for j in 1..=100 {
            let term = (-2.0 * (j * j) as f64 * lambda * lambda).exp();
            s += if j % 2 == 1 { term } else { -term };
            if term < 1e-300 {
                break;
            }
        }
        (2.0 * s).clamp(0.0, 1.0)
    }
}

/// Asymptotic p-value with the usual finite-n scaling of the statistic.
pub fn ks_pvalue(d: f64, n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    kolmogorov_sf((sn + 0.12 + 0.11 / sn) * d)
}

/// Maximum-likelihood degrees of freedom by golden-section search; the
/// log-likelihood is concave in the dof.
pub fn mle_dof(norms: &[f64]) -> f64 {
    let n = norms.len() as f64;
    let sum_ln: f64 = norms.iter().map(|x| x.ln()).sum();
    let ll = |k: f64| (k - 1.0) * sum_ln - n * ((k / 2.0 - 1.0) * LN_2 + ln_gamma(k / 2.0));
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = DOF_RANGE;
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let (mut fc, mut fd) = (ll(c), ll(d));
    while b - a > 1e-9 * (1.0 + a.abs()) {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = ll(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = ll(d);
        }
    }
    (a + b) / 2.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub center: f64,
    pub count: usize,
}

pub fn histogram_bins(values: &[f64], bins: usize) -> Vec<HistogramBin> {
    if values.is_empty() || bins == 0 {
        return Vec::new();
    }
    let (min, max) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let width = (max - min) / bins as f64;
    histogram(values, min, max, bins)
        .into_iter()
        .enumerate()
        .map(|(i, count)| HistogramBin { center: min + (i as f64 + 0.5) * width, count })
        .collect()
}

/// Two-column `center,count` export.
pub fn write_histogram_csv(path: impl AsRef<Path>, bins: &[HistogramBin]) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    for b in bins {
        w.serialize(b)?;
    }
    w.flush().map_err(|e| CoreError::io(path.as_ref(), e))
}

pub fn read_histogram_csv(path: impl AsRef<Path>) -> Result<Vec<HistogramBin>> {
    let mut r = csv::Reader::from_path(path.as_ref())?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChiFitReport {
    pub n: usize,
    pub dof: f64,
    /// False when the dof was supplied rather than fitted.
    pub dof_fitted: bool,
    pub ks_statistic: f64,
    pub p_value: f64,
    pub histogram: Vec<HistogramBin>,
}

/// Goodness of fit of `norms` to a chi distribution, with the dof given or
/// fitted by maximum likelihood.
pub fn chi_fit(norms: &[f64], dof_hint: Option<usize>) -> Result<ChiFitReport> {
    if norms.len() < MIN_NORMS {
        return Err(CoreError::contract(format!("chi fit needs at least {MIN_NORMS} norms, got {}", norms.len())));
    }
    if let Some(bad) = norms.iter().find(|&&x| !(x > 0.0 && x.is_finite())) {
        return Err(CoreError::contract(format!("chi fit needs positive finite norms, got {bad}")));
    }
    if dof_hint == Some(0) {
        return Err(CoreError::contract("dof must be positive"));
    }
    let (dof, dof_fitted) = match dof_hint {
        Some(k) => (k as f64, false),
        None => (mle_dof(norms), true),
    };
    let ks_statistic = ks_statistic(norms, |x| chi_cdf(x, dof));
    Ok(ChiFitReport {
        n: norms.len(),
        dof,
        dof_fitted,
        ks_statistic,
        p_value: ks_pvalue(ks_statistic, norms.len()),
        histogram: histogram_bins(norms, HISTOGRAM_BINS),
    })
}
