//! Train-on-synthetic, test-on-real evaluation with a small 1-D CNN.

use anodae_nn::{sigmoid, LayerSpec, Mode, Network, OptimizerConfig, OptimizerKind, OptimizerState, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::classification::{weighted_f1, Confusion};
use crate::error::{CoreError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            channels: vec![8, 16, 32],
            kernel: 5,
            optimizer: OptimizerConfig { kind: OptimizerKind::AdaBelief, lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-16 },
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size < 2 || self.channels.is_empty() || self.kernel % 2 == 0 {
            return Err(CoreError::contract("classifier needs epochs >= 1, batch_size >= 2, channels and an odd kernel"));
        }
        Ok(())
    }
}

/// conv-BN-ReLU blocks, global average pooling and a linear logit head.
pub struct CnnClassifier {
    net: Network,
    seq_len: usize,
}

fn tensor(rows: &[&[f64]], seq_len: usize) -> Result<Tensor> {
    let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
    Ok(Tensor::new(vec![rows.len(), 1, seq_len], data)?)
}

impl CnnClassifier {
    pub fn new(seq_len: usize, config: &ClassifierConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut specs = Vec::new();
        let mut c_in = 1;
        for &c in &config.channels {
            specs.push(LayerSpec::conv(c_in, c, config.kernel, 2, config.kernel / 2).without_bias());
            specs.push(LayerSpec::BatchNorm { channels: c });
            specs.push(LayerSpec::Relu);
            c_in = c;
        }
        specs.push(LayerSpec::GlobalAvgPool);
        specs.push(LayerSpec::linear(c_in, 1));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Network::new(specs, vec![1, seq_len], Vec::new(), &mut rng)?;
        Ok(Self { net, seq_len })
    }

    /// Binary cross-entropy training on logits. Returns false when a loss or
    /// gradient went non-finite.
    pub fn fit(&mut self, x: &[Vec<f64>], y: &[bool], config: &ClassifierConfig, seed: u64) -> Result<bool> {
        if x.len() != y.len() || x.is_empty() {
            return Err(CoreError::contract("classifier needs matching, non-empty inputs and labels"));
        }
        let mut opt = OptimizerState::for_params(config.optimizer, &self.net.params());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..x.len()).collect();
        for _ in 0..config.epochs {
            order.shuffle(&mut rng);
            for batch in order.chunks(config.batch_size).filter(|b| b.len() > 1) {
                let rows: Vec<&[f64]> = batch.iter().map(|&i| x[i].as_slice()).collect();
                let (logits, tape) = self.net.forward(&tensor(&rows, self.seq_len)?, Mode::Train)?;
                let n = batch.len() as f64;
                let mut loss = 0.0;
                let mut grad = Vec::with_capacity(batch.len());
                for (&z, &i) in logits.data().iter().zip(batch) {
                    let t = f64::from(u8::from(y[i]));
                    loss += z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
                    grad.push((sigmoid(z) - t) / n);
                }
                if !loss.is_finite() {
                    return Ok(false);
                }
                let mut grads = self.net.zero_grads();
                self.net.backward(&tape, Some(&Tensor::new(logits.shape().to_vec(), grad)?), &[], Some(&mut grads))?;
                if !grads.all_finite() {
                    return Ok(false);
                }
                self.net.commit_batch_stats(&tape);
                let mut params = self.net.params_mut();
                opt.step(&mut params, &grads.flat())?;
            }
        }
        Ok(self.net.params().iter().all(|p| p.iter().all(|v| v.is_finite())))
    }

    pub fn predict(&self, x: &[Vec<f64>]) -> Result<Vec<bool>> {
        let mut out = Vec::with_capacity(x.len());
        for chunk in x.chunks(256) {
            let rows: Vec<&[f64]> = chunk.iter().map(Vec::as_slice).collect();
            let (logits, _) = self.net.forward(&tensor(&rows, self.seq_len)?, Mode::Eval)?;
            out.extend(logits.data().iter().map(|&z| z > 0.0));
        }
        Ok(out)
    }
}

/// Weighted F1 on `(eval_x, eval_y)` of a classifier trained on
/// `(train_x, train_y)`; `None` when training diverged.
pub fn train_and_score(
    train_x: &[Vec<f64>],
    train_y: &[bool],
    eval_x: &[Vec<f64>],
    eval_y: &[bool],
    config: &ClassifierConfig,
    seed: u64,
) -> Result<Option<f64>> {
    let seq_len = train_x.first().map(Vec::len).ok_or_else(|| CoreError::contract("empty training set"))?;
    let mut clf = CnnClassifier::new(seq_len, config, seed)?;
    if !clf.fit(train_x, train_y, config, seed)? {
        return Ok(None);
    }
    let predicted = clf.predict(eval_x)?;
    Ok(Some(weighted_f1(&Confusion::from_labels(eval_y, &predicted))))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TstrMeasurement {
    pub epoch: usize,
    /// Classifier trained on reconstructions; `None` when it diverged.
    pub tstr: Option<f64>,
    /// Same classifier and seed trained on the real counterparts.
    pub baseline: Option<f64>,
}

/// One measurement: classifiers with identical seeds trained on the
/// synthetic and on the real training half, both scored on the real
/// evaluation half.
pub fn tstr_measure(
    epoch: usize,
    synthetic_train: &[Vec<f64>],
    real_train: &[Vec<f64>],
    train_labels: &[bool],
    real_eval: &[Vec<f64>],
    eval_labels: &[bool],
    config: &ClassifierConfig,
    seed: u64,
) -> Result<TstrMeasurement> {
    if synthetic_train.len() != real_train.len() {
        return Err(CoreError::contract("synthetic and real training sets differ in size"));
    }
    Ok(TstrMeasurement {
        epoch,
        tstr: train_and_score(synthetic_train, train_labels, real_eval, eval_labels, config, seed)?,
        baseline: train_and_score(real_train, train_labels, real_eval, eval_labels, config, seed)?,
    })
}

/// Mean of the valid values among the last `window` entries.
pub fn moving_average(values: &[Option<f64>], window: usize) -> Option<f64> {
    let start = values.len().saturating_sub(window.max(1));
    let valid: Vec<f64> = values[start..].iter().flatten().copied().collect();
    (!valid.is_empty()).then(|| valid.iter().sum::<f64>() / valid.len() as f64)
}

/// TSTR is a separability proxy: how well a classifier fitted to generated
/// data separates the real classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TstrReport {
    pub window: usize,
    pub measurements: Vec<TstrMeasurement>,
    pub tstr: Option<f64>,
    pub baseline: Option<f64>,
    /// `tstr / baseline`, defined when the baseline is positive.
    pub tstr_n: Option<f64>,
}

impl TstrReport {
    pub fn new(measurements: Vec<TstrMeasurement>, window: usize) -> Self {
        let tstr = moving_average(&measurements.iter().map(|m| m.tstr).collect::<Vec<_>>(), window);
        let baseline = moving_average(&measurements.iter().map(|m| m.baseline).collect::<Vec<_>>(), window);
        let tstr_n = match (tstr, baseline) {
            (Some(t), Some(b)) if b > 0.0 => Some(t / b),
            _ => None,
        };
        Self { window, measurements, tstr, baseline, tstr_n }
    }
}
