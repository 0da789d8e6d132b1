//! Per-sample anomaly-score components and their min-max normalization.

use std::path::Path;

use anodae_nn::Mode;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Label};
use crate::error::{CoreError, Result};
use crate::model::{ModelState, OutputActivation};

/// Samples per scoring forward pass.
pub const SCORING_BATCH: usize = 256;
pub const DEFAULT_BINS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorComponents {
    pub sample_id: String,
    /// Reconstruction MSE.
    pub r: f64,
    /// Discriminator feature-matching MSE; 0 without a discriminator.
    pub d: f64,
    /// Latent-norm deviation (signed for the chi and empirical styles).
    pub l: f64,
    pub z_norm: f64,
    pub label: Option<Label>,
}

impl ErrorComponents {
    pub fn is_abnormal(&self) -> Option<bool> {
        self.label.map(Label::is_abnormal)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentStyle {
    /// `||z|| - sqrt(dim - 1)`
    FixedChi,
    /// `||z|| - mode of the training norms`
    Empirical,
    /// `||z||`
    RawNorm,
}

/// Mode of the chi distribution with `latent_dim` degrees of freedom.
pub fn chi_mode(latent_dim: usize) -> Result<f64> {
    if latent_dim == 0 {
        return Err(CoreError::contract("latent_dim must be at least 1"));
    }
    Ok(((latent_dim - 1) as f64).sqrt())
}

/// Centre of the most populated of `bins` equal-width bins over
/// `[min, max]`; the lowest bin wins ties.
pub fn empirical_mode(norms: &[f64], bins: usize) -> Result<f64> {
    if norms.len() < 10 || bins < 2 {
        return Err(CoreError::contract(format!(
            "empirical mode needs at least 10 norms and 2 bins, got {} and {bins}",
            norms.len()
        )));
    }
    let (min, max) = norms.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !min.is_finite() || !max.is_finite() {
        return Err(CoreError::contract("norms must be finite"));
    }
    if max == min {
        return Ok(min);
    }
    let counts = histogram(norms, min, max, bins);
    let best = counts.iter().enumerate().fold(0, |best, (i, &c)| if c > counts[best] { i } else { best });
    let width = (max - min) / bins as f64;
    Ok(min + (best as f64 + 0.5) * width)
}

/// Equal-width bin counts over `[min, max]`; the top edge falls in the last bin.
pub fn histogram(values: &[f64], min: f64, max: f64, bins: usize) -> Vec<usize> {
    let mut counts = vec![0usize; bins];
    let width = (max - min) / bins as f64;
    for &v in values {
        if !(min..=max).contains(&v) {
            continue;
        }
        let idx = if width > 0.0 { (((v - min) / width) as usize).min(bins - 1) } else { 0 };
        counts[idx] += 1;
    }
    counts
}

pub fn l2_norm(z: &[f64]) -> f64 {
    z.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn latent_score(z: &[f64], mode_estimate: f64, style: LatentStyle) -> f64 {
    let norm = l2_norm(z);
    match style {
        LatentStyle::FixedChi => norm - ((z.len().max(1) - 1) as f64).sqrt(),
        LatentStyle::Empirical => norm - mode_estimate,
        LatentStyle::RawNorm => norm,
    }
}

/// Style plus the reference mode it subtracts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatentReference {
    pub style: LatentStyle,
    pub mode: f64,
}

impl LatentReference {
    /// The empirical style takes its mode from `train_norms`.
    pub fn fit(style: LatentStyle, latent_dim: usize, train_norms: &[f64], bins: usize) -> Result<Self> {
        let mode = match style {
            LatentStyle::FixedChi => chi_mode(latent_dim)?,
            LatentStyle::Empirical => empirical_mode(train_norms, bins)?,
            LatentStyle::RawNorm => 0.0,
        };
        Ok(Self { style, mode })
    }

    pub fn score(&self, z: &[f64]) -> f64 {
        latent_score(z, self.mode, self.style)
    }
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

fn to_unit_range(model: &ModelState, v: f64) -> f64 {
    match model.variant.output() {
        OutputActivation::Sigmoid => v,
        OutputActivation::Tanh => (v + 1.0) / 2.0,
    }
}

/// Posterior means of every sample, in order.
pub fn latent_means(model: &ModelState, dataset: &Dataset) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(dataset.len());
    for chunk in dataset.samples.chunks(SCORING_BATCH) {
        let rows: Vec<&[f64]> = chunk.iter().map(|s| s.values.as_slice()).collect();
        let post = model.encode(&model.batch_tensor(&rows)?, Mode::Eval)?;
        out.extend(post.mu.rows().map(<[f64]>::to_vec));
    }
    Ok(out)
}

/// Components of every sample of `dataset` on a frozen model: posterior-mean
/// encoding, eval-mode batch norm.
pub fn score_dataset(model: &ModelState, dataset: &Dataset, latent: &LatentReference) -> Result<Vec<ErrorComponents>> {
    let mut out = Vec::with_capacity(dataset.len());
    for chunk in dataset.samples.chunks(SCORING_BATCH) {
        let rows: Vec<&[f64]> = chunk.iter().map(|s| s.values.as_slice()).collect();
        let x = model.batch_tensor(&rows)?;
        let (mu, x_hat) = model.reconstruct(&x)?;
        let feats = match (
            model.discriminator_features(&x, Mode::Eval)?,
            model.discriminator_features(&x_hat, Mode::Eval)?,
        ) {
            (Some(a), Some(b)) => Some((a.features, b.features)),
            _ => None,
        };
        for (i, sample) in chunk.iter().enumerate() {
            let recon: Vec<f64> = x_hat.row(i).iter().map(|&v| to_unit_range(model, v)).collect();
            let r = mse(&sample.values, &recon);
            let d = feats.as_ref().map_or(0.0, |(a, b)| mse(&a[i], &b[i]));
            let z = mu.row(i);
            out.push(ErrorComponents {
                sample_id: sample.source_id.clone(),
                r,
                d,
                l: latent.score(z),
                z_norm: l2_norm(z),
                label: Some(sample.label),
            });
        }
    }
    Ok(out)
}

/// R(x) for a single sample.
pub fn reconstruction_score(model: &ModelState, x: &[f64]) -> Result<f64> {
    let t = model.batch_tensor(&[x])?;
    let (_, x_hat) = model.reconstruct(&t)?;
    let recon: Vec<f64> = x_hat.row(0).iter().map(|&v| to_unit_range(model, v)).collect();
    Ok(mse(x, &recon))
}

/// D(x) for a single sample; 0 without a discriminator.
pub fn discrimination_score(model: &ModelState, x: &[f64]) -> Result<f64> {
    let t = model.batch_tensor(&[x])?;
    let (_, x_hat) = model.reconstruct(&t)?;
    match (model.discriminator_features(&t, Mode::Eval)?, model.discriminator_features(&x_hat, Mode::Eval)?) {
        (Some(a), Some(b)) => Ok(mse(&a.features[0], &b.features[0])),
        _ => Ok(0.0),
    }
}

/// How the latent component enters a composer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LTransform {
    Signed,
    Absolute,
}

impl LTransform {
    pub fn apply(self, l: f64) -> f64 {
        match self {
            LTransform::Signed => l,
            LTransform::Absolute => l.abs(),
        }
    }
}

/// `(r, d, l)` after the latent transform.
pub fn raw_triples(components: &[ErrorComponents], transform: LTransform) -> Vec<[f64; 3]> {
    components.iter().map(|c| [c.r, c.d, transform.apply(c.l)]).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentNormalizer {
    pub min: [f64; 3],
    pub max: [f64; 3],
    /// Components that were constant on the fit split; they map to 0.
    pub constant: [bool; 3],
}

pub const COMPONENT_NAMES: [&str; 3] = ["r", "d", "l"];

impl ComponentNormalizer {
    /// Fits per-component min/max. Returns warnings for constant components.
    pub fn fit(triples: &[[f64; 3]]) -> Result<(Self, Vec<String>)> {
        if triples.is_empty() {
            return Err(CoreError::contract("cannot fit a normalizer on zero samples"));
        }
        let mut min = [f64::INFINITY; 3];
        let mut max = [f64::NEG_INFINITY; 3];
        for t in triples {
            for k in 0..3 {
                if !t[k].is_finite() {
                    return Err(CoreError::contract(format!("non-finite {} component", COMPONENT_NAMES[k])));
                }
                min[k] = min[k].min(t[k]);
                max[k] = max[k].max(t[k]);
            }
        }
        let mut constant = [false; 3];
        let mut warnings = Vec::new();
        for k in 0..3 {
            if max[k] <= min[k] {
                constant[k] = true;
                warnings.push(format!("component {} is constant ({}) on the fit split; it maps to 0", COMPONENT_NAMES[k], min[k]));
            }
        }
        Ok((Self { min, max, constant }, warnings))
    }

    pub fn transform(&self, t: &[f64; 3]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for k in 0..3 {
            out[k] = if self.constant[k] { 0.0 } else { ((t[k] - self.min[k]) / (self.max[k] - self.min[k])).clamp(0.0, 1.0) };
        }
        out
    }

    pub fn apply(&self, triples: &[[f64; 3]]) -> Vec<[f64; 3]> {
        triples.iter().map(|t| self.transform(t)).collect()
    }
}

/// `(1 - lambda - gamma) r + lambda d + gamma l`
pub fn linear_score(c: &[f64; 3], lambda: f64, gamma: f64) -> Result<f64> {
    if lambda < 0.0 || gamma < 0.0 || lambda + gamma > 1.0 + 1e-12 {
        return Err(CoreError::contract(format!("invalid weights lambda {lambda}, gamma {gamma}")));
    }
    Ok(linear_unchecked(c, lambda, gamma))
}

pub(crate) fn linear_unchecked(c: &[f64; 3], lambda: f64, gamma: f64) -> f64 {
    (1.0 - lambda - gamma) * c[0] + lambda * c[1] + gamma * c[2]
}

#[derive(Debug, Serialize, Deserialize)]
struct ComponentRow {
    sample_id: String,
    r: f64,
    d: f64,
    l: f64,
    z_norm: f64,
    label: Option<u8>,
}

/// Writes the `sample_id, r, d, l, z_norm, label` component dump.
pub fn write_components_csv(path: impl AsRef<Path>, components: &[ErrorComponents]) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    for c in components {
        w.serialize(ComponentRow {
            sample_id: c.sample_id.clone(),
            r: c.r,
            d: c.d,
            l: c.l,
            z_norm: c.z_norm,
            label: c.label.map(Label::as_u8),
        })?;
    }
    w.flush().map_err(|e| CoreError::io(path.as_ref(), e))?;
    Ok(())
}

pub fn read_components_csv(path: impl AsRef<Path>) -> Result<Vec<ErrorComponents>> {
    let mut r = csv::Reader::from_path(path.as_ref())?;
    r.deserialize::<ComponentRow>()
        .enumerate()
        .map(|(i, row)| {
            let row = row?;
            let label = row
                .label
                .map(Label::try_from)
                .transpose()
                .map_err(|reason| CoreError::Ingest { row: i + 2, reason })?;
            Ok(ErrorComponents { sample_id: row.sample_id, r: row.r, d: row.d, l: row.l, z_norm: row.z_norm, label })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn chi_modes() {
        assert_eq!(chi_mode(1).unwrap(), 0.0);
        assert!((chi_mode(6).unwrap() - 5f64.sqrt()).abs() < 1e-15);
        assert_eq!(chi_mode(101).unwrap(), 10.0);
        assert!(chi_mode(0).is_err());
    }

    #[test]
    fn empirical_mode_cases() {
        assert_eq!(empirical_mode(&[3.0; 12], 100).unwrap(), 3.0);
        let mut v = vec![1.0; 100];
        v.extend(vec![5.0; 200]);
        let m = empirical_mode(&v, 100).unwrap();
        assert!((m - (5.0 - 0.02)).abs() < 1e-12, "{m}");
        // ties go to the lowest bin
        let mut t = vec![1.0; 50];
        t.extend(vec![5.0; 50]);
        assert!((empirical_mode(&t, 4).unwrap() - 1.5).abs() < 1e-12);
        assert!(empirical_mode(&[1.0; 5], 10).is_err());
    }

    #[test]
    fn latent_styles() {
        let z = [0.0; 6];
        assert!((latent_score(&z, 0.0, LatentStyle::FixedChi) + 5f64.sqrt()).abs() < 1e-15);
        let z = [3.0, 4.0];
        assert_eq!(latent_score(&z, 5.0, LatentStyle::Empirical), 0.0);
        assert_eq!(latent_score(&z, 99.0, LatentStyle::RawNorm), 5.0);
    }

    #[test]
    fn hand_mse() {
        assert_eq!(mse(&[0.0; 4], &[0.5; 4]), 0.25);
        assert_eq!(mse(&[0.3, 0.7], &[0.3, 0.7]), 0.0);
    }

    #[test]
    fn normalizer_policy() {
        let (n, w) = ComponentNormalizer::fit(&[[1.0, 0.0, 2.0], [3.0, 0.0, 4.0]]).unwrap();
        assert_eq!(w.len(), 1);
        assert!(w[0].contains("component d"));
        assert_eq!(n.transform(&[1.0, 7.0, 2.0]), [0.0, 0.0, 0.0]);
        assert_eq!(n.transform(&[3.0, 0.0, 4.0]), [1.0, 0.0, 1.0]);
        assert_eq!(n.transform(&[5.0, 0.0, 3.0]), [1.0, 0.0, 0.5]);
        assert_eq!(n.transform(&[-5.0, 0.0, 3.0])[0], 0.0);
    }

    #[test]
    fn linear_score_examples() {
        assert_eq!(linear_score(&[0.4, 0.9, 0.1], 0.0, 0.0).unwrap(), 0.4);
        assert!((linear_score(&[1.0, 2.0, 3.0], 0.2, 0.1).unwrap() - 1.4).abs() < 1e-12);
        let c = [0.3, 0.8, 0.5];
        assert_eq!(linear_score(&c, 0.25, 0.0).unwrap(), 0.75 * 0.3 + 0.25 * 0.8);
        assert!(linear_score(&c, 0.7, 0.4).is_err());
        assert!(linear_score(&c, -0.1, 0.0).is_err());
    }

    #[test]
    fn component_csv_round_trip() {
        let comps = vec![
            ErrorComponents { sample_id: "a".into(), r: 0.1, d: 0.2, l: -0.3, z_norm: 1.5, label: Some(Label::Normal) },
            ErrorComponents { sample_id: "b".into(), r: 1e-9, d: 0.0, l: 2.0, z_norm: 4.0, label: None },
        ];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.csv");
        write_components_csv(&p, &comps).unwrap();
        let header = std::fs::read_to_string(&p).unwrap();
        assert!(header.starts_with("sample_id,r,d,l,z_norm,label"));
        assert_eq!(read_components_csv(&p).unwrap(), comps);
    }

    proptest! {
        #[test]
        fn empirical_translation(shift in -3.0f64..3.0, norms in prop::collection::vec(0.0f64..5.0, 3)) {
            let a = latent_score(&norms, 1.0, LatentStyle::Empirical);
            let b = latent_score(&norms, 1.0 + shift, LatentStyle::Empirical);
            prop_assert!((a - b - shift).abs() < 1e-12);
        }

        #[test]
        fn linear_score_is_monotone(c in prop::array::uniform3(0.0f64..1.0), k in 0usize..3, bump in 0.0f64..1.0, lambda in 0.0f64..0.5, gamma in 0.0f64..0.5) {
            let mut up = c;
            up[k] += bump;
            prop_assert!(linear_score(&up, lambda, gamma).unwrap() >= linear_score(&c, lambda, gamma).unwrap());
        }

        #[test]
        fn normalizer_preserves_order(values in prop::collection::vec(-10.0f64..10.0, 2..40)) {
            let triples: Vec<[f64; 3]> = values.iter().map(|&v| [v, v, v]).collect();
            prop_assume!(values.iter().any(|&v| v != values[0]));
            let (n, _) = ComponentNormalizer::fit(&triples).unwrap();
            let out = n.apply(&triples);
            for i in 0..values.len() {
                for j in 0..values.len() {
                    if values[i] < values[j] {
                        prop_assert!(out[i][0] < out[j][0]);
                    }
                }
            }
        }
    }
}
