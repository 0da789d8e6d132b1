//! Seeded synthetic benchmark: smooth periodic normals and two anomaly
//! shapes (local noise bursts, inverted sharp peaks).

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Label, SeriesSample};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub normal: usize,
    pub abnormal: usize,
    pub seq_len: usize,
    pub seed: u64,
    pub noise_std: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self { normal: 800, abnormal: 200, seq_len: 160, seed: 0, noise_std: 0.03 }
    }
}

fn sine_family(rng: &mut ChaCha8Rng, seq_len: usize, noise_std: f64) -> Vec<f64> {
    let freq = rng.random_range(2.0..4.0);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let amp = rng.random_range(0.8..1.2);
    let harmonic = rng.random_range(0.1..0.3);
    let noise = Normal::new(0.0, noise_std).expect("noise std is finite");
    (0..seq_len)
        .map(|i| {
            let t = std::f64::consts::TAU * freq * i as f64 / seq_len as f64;
            amp * (t + phase).sin() + harmonic * amp * (2.0 * t + 2.0 * phase).sin() + noise.sample(rng)
        })
        .collect()
}

fn noise_burst(rng: &mut ChaCha8Rng, values: &mut [f64]) {
    let n = values.len();
    let width = rng.random_range(n / 8..n / 4).max(2);
    let start = rng.random_range(0..n - width);
    let burst = Normal::new(0.0, 0.6).expect("fixed std");
    for v in &mut values[start..start + width] {
        *v += burst.sample(rng);
    }
}

fn inverted_peaks(rng: &mut ChaCha8Rng, values: &mut [f64]) {
    let n = values.len();
    for _ in 0..rng.random_range(1..=3) {
        let centre = rng.random_range(2..n - 2) as f64;
        let depth = rng.random_range(1.5..2.5);
        for (i, v) in values.iter_mut().enumerate() {
            let d = (i as f64 - centre) / 1.5;
            *v -= depth * (-0.5 * d * d).exp();
        }
    }
}

/// Normals first, then abnormals alternating between the two shapes.
pub fn generate(config: &SyntheticConfig) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut samples = Vec::with_capacity(config.normal + config.abnormal);
    for i in 0..config.normal {
        let values = sine_family(&mut rng, config.seq_len, config.noise_std);
        samples.push(SeriesSample { values, label: Label::Normal, source_id: format!("normal-{i}") });
    }
    for i in 0..config.abnormal {
        let mut values = sine_family(&mut rng, config.seq_len, config.noise_std);
        let kind = if i % 2 == 0 {
            noise_burst(&mut rng, &mut values);
            "burst"
        } else {
            inverted_peaks(&mut rng, &mut values);
            "peaks"
        };
        samples.push(SeriesSample { values, label: Label::Abnormal, source_id: format!("{kind}-{i}") });
    }
    Dataset::new("synthetic", samples)
}
