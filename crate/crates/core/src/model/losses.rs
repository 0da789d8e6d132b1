//! Loss terms and their gradients, on flat batch-major buffers.

/// Floor on the arguments of the discriminator log terms.
pub const LOG_CLAMP: f64 = 1e-7;
/// Keeps reconstruction BCE finite when the decoder saturates.
pub const BCE_CLAMP: f64 = 1e-12;
/// Range of the log-sigma head.
pub const LOG_SIGMA_RANGE: (f64, f64) = (-10.0, 10.0);

/// Mean binary cross-entropy over every element and its gradient w.r.t.
/// `x_hat`.
pub fn bce_mean(x: &[f64], x_hat: &[f64]) -> (f64, Vec<f64>) {
    let n = x.len() as f64;
    let mut loss = 0.0;
    let grad = x
        .iter()
        .zip(x_hat)
        .map(|(&t, &p)| {
            let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            loss -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
            -(t / p - (1.0 - t) / (1.0 - p)) / n
        })
        .collect();
    (loss / n, grad)
}

/// Mean squared error over every element and its gradient w.r.t. `x_hat`.
pub fn mse_mean(x: &[f64], x_hat: &[f64]) -> (f64, Vec<f64>) {
    let n = x.len() as f64;
    let mut loss = 0.0;
    let grad = x
        .iter()
        .zip(x_hat)
        .map(|(&t, &p)| {
            loss += (p - t) * (p - t);
            2.0 * (p - t) / n
        })
        .collect();
    (loss / n, grad)
}

/// `0.5 * sum(mu^2 + sigma^2 - 1 - ln sigma^2)` summed over the batch, with
/// gradients w.r.t. `mu` and `log_sigma`.
pub fn kl_standard_normal(mu: &[f64], log_sigma: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let mut kl = 0.0;
    let mut g_ls = Vec::with_capacity(log_sigma.len());
    for (&m, &ls) in mu.iter().zip(log_sigma) {
        let var = (2.0 * ls).exp();
        kl += 0.5 * (m * m + var - 1.0 - 2.0 * ls);
        g_ls.push(var - 1.0);
    }
    (kl, mu.to_vec(), g_ls)
}

/// Clamped log-sigma and the mask of entries whose gradient passes.
pub fn clamp_log_sigma(raw: &[f64]) -> (Vec<f64>, Vec<bool>) {
    let (lo, hi) = LOG_SIGMA_RANGE;
    raw.iter().map(|&v| (v.clamp(lo, hi), (lo..=hi).contains(&v))).unzip()
}

/// `-mean[ln D(x) + ln(1 - D(x_hat))]` and its gradients w.r.t. both
/// discriminator outputs.
pub fn discriminator_bce(d_real: &[f64], d_fake: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let n = d_real.len() as f64;
    let mut loss = 0.0;
    let g_real = d_real
        .iter()
        .map(|&d| {
            loss -= d.max(LOG_CLAMP).ln();
            if d > LOG_CLAMP {
                -1.0 / (n * d)
            } else {
                0.0
            }
        })
        .collect();
    let g_fake = d_fake
        .iter()
        .map(|&d| {
            loss -= (1.0 - d).max(LOG_CLAMP).ln();
            if 1.0 - d > LOG_CLAMP {
                1.0 / (n * (1.0 - d))
            } else {
                0.0
            }
        })
        .collect();
    (loss / n, g_real, g_fake)
}

/// Squared L2 distance between per-sample feature vectors, averaged over the
/// batch, and its gradient w.r.t. the reconstruction features.
pub fn feature_matching(f_real: &[f64], f_fake: &[f64], batch: usize) -> (f64, Vec<f64>) {
    let n = batch as f64;
    let mut loss = 0.0;
    let grad = f_real
        .iter()
        .zip(f_fake)
        .map(|(&a, &b)| {
            loss += (b - a) * (b - a);
            2.0 * (b - a) / n
        })
        .collect();
    (loss / n, grad)
}

/// KL weight of the unnormalized objective (reconstruction summed over all
/// elements) equivalent to `beta_raw` under the per-element mean.
pub fn unscaled_beta(beta_raw: f64, seq_len: usize, channels: usize, batch: usize) -> f64 {
    beta_raw * (seq_len * channels * batch) as f64
}
