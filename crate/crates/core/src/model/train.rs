use std::path::{Path, PathBuf};
use std::time::Instant;

use anodae_nn::{Grads, Mode, NnError, OptimizerConfig, OptimizerState};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{sample_eps, Checkpoint, LossWeights, ModelState, Optimizers};
use crate::data::Dataset;
use crate::error::{CoreError, Result};

/// Power iteration after each discriminator update stops once the estimate
/// grows by less than this relative amount.
const SPECTRAL_TOL: f64 = 1e-7;
const SPECTRAL_MAX_ITER: usize = 2000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// KL weight under the per-element reconstruction mean.
    pub beta_raw: f64,
    pub nu: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Discriminator updates per generator update; variant default if unset.
    pub d_steps: Option<usize>,
    pub seed: u64,
    /// Variant default if unset.
    pub optimizer: Option<OptimizerConfig>,
    /// Validation (and checkpoint) cadence in epochs; the last epoch is
    /// always a validation epoch.
    pub validate_every: usize,
    /// Power iterations before each discriminator forward pass.
    pub spectral_iterations: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            beta_raw: 1e-4,
            nu: 1.0,
            batch_size: 256,
            epochs: 500,
            d_steps: None,
            seed: 0,
            optimizer: None,
            validate_every: 5,
            spectral_iterations: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(CoreError::contract(m));
        if !(self.beta_raw >= 0.0 && self.beta_raw.is_finite()) {
            return fail(format!("beta_raw must be a nonnegative number, got {}", self.beta_raw));
        }
        if !(self.nu >= 0.0 && self.nu.is_finite()) {
            return fail(format!("nu must be a nonnegative number, got {}", self.nu));
        }
        if self.batch_size < 2 {
            return fail(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if self.epochs == 0 || self.validate_every == 0 || self.spectral_iterations == 0 {
            return fail("epochs, validate_every and spectral_iterations must be positive".into());
        }
        if self.d_steps == Some(0) {
            return fail("d_steps must be positive".into());
        }
        if let Some(o) = &self.optimizer {
            if !(o.lr > 0.0) || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
                return fail(format!("invalid optimizer settings {o:?}"));
            }
        }
        Ok(())
    }

    pub fn is_validation_epoch(&self, epoch: usize) -> bool {
        epoch % self.validate_every == 0 || epoch == self.epochs
    }
}

/// Scalars of one generator step (with the discriminator loss averaged over
/// the preceding discriminator steps). Absent terms are 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: usize,
    pub l_d: f64,
    pub l_adv: f64,
    pub l_rec: f64,
    pub l_kl: f64,
    pub l_g: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    pub l_d: f64,
    pub l_adv: f64,
    pub l_rec: f64,
    pub l_kl: f64,
    pub l_g: f64,
    pub seconds: f64,
}

/// Hooks into the training loop.
pub trait TrainObserver {
    fn on_step(&mut self, _record: &LossRecord) {}

    fn on_epoch(&mut self, _summary: &EpochSummary) -> Result<()> {
        Ok(())
    }

    /// Runs on validation epochs, after the checkpoint (if any) is written.
    fn on_validation(&mut self, _model: &ModelState, _epoch: usize, _checkpoint: Option<&Path>) -> Result<()> {
        Ok(())
    }
}

pub struct NoopObserver;

impl TrainObserver for NoopObserver {}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Where `epoch-NNNN.ckpt` and `last.ckpt` go; no checkpoints if unset.
    pub checkpoint_dir: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochSummary>,
    pub checkpoints: Vec<(usize, PathBuf)>,
}

pub fn checkpoint_name(epoch: usize) -> String {
    format!("epoch-{epoch:04}.ckpt")
}

fn diverged(epoch: usize, step: usize, what: impl Into<String>, last_good: &Option<PathBuf>) -> CoreError {
    CoreError::NonFiniteLoss { epoch, step, what: what.into(), last_good: last_good.clone() }
}

fn apply(
    state: &mut OptimizerState,
    params: Vec<&mut Vec<f64>>,
    grads: &Grads,
    ctx: (usize, usize, &str, &Option<PathBuf>),
) -> Result<()> {
    let mut params = params;
    state.step(&mut params, &grads.flat()).map_err(|e| match e {
        NnError::NonFiniteGradient(d) => diverged(
            ctx.0,
            ctx.1,
            format!("{} gradient (tensor {}, index {}: {})", ctx.2, d.tensor, d.index, d.value),
            ctx.3,
        ),
        other => other.into(),
    })
}

/// Trains on the normal-only `train` set, alternating discriminator and
/// generator updates. Resumes from `model.epoch` and `model.optimizers`.
pub fn train(
    model: &mut ModelState,
    train: &Dataset,
    config: &TrainConfig,
    options: &TrainOptions,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    config.validate()?;
    if let Some(i) = train.samples.iter().position(|s| s.label.is_abnormal()) {
        return Err(CoreError::contract(format!("training set sample {i} is abnormal; training is one-class")));
    }
    if train.len() < 2 {
        return Err(CoreError::contract("training needs at least 2 samples"));
    }
    if train.seq_len != model.arch.seq_len {
        return Err(CoreError::contract(format!(
            "training data has length {}, model expects {}",
            train.seq_len, model.arch.seq_len
        )));
    }
    if let Some(dir) = &options.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    }

    let variant = model.variant;
    let opt_config = config.optimizer.unwrap_or_else(|| variant.default_optimizer());
    let d_steps = if model.discriminator.is_some() { config.d_steps.unwrap_or(variant.default_d_steps()).max(1) } else { 0 };
    let beta = if variant.is_variational() { config.beta_raw } else { 0.0 };
    let weights = LossWeights { beta, nu: config.nu };
    if model.optimizers.is_none() {
        model.optimizers = Some(Optimizers {
            encoder: OptimizerState::for_params(opt_config, &model.encoder.params()),
            decoder: OptimizerState::for_params(opt_config, &model.decoder.params()),
            discriminator: model.discriminator.as_ref().map(|d| OptimizerState::for_params(opt_config, &d.params())),
        });
    }

    if let Some(disc) = &mut model.discriminator {
        disc.set_spectral_iterations(config.spectral_iterations);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0f_7a11 ^ (model.epoch as u64).wrapping_mul(0x9e37_79b9));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut outcome = TrainOutcome { epochs: Vec::new(), checkpoints: Vec::new() };
    let mut last_good: Option<PathBuf> = None;
    let mut step = 0usize;

    while model.epoch < config.epochs {
        let epoch = model.epoch + 1;
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 5];
        let mut steps = 0usize;
        for chunk in order.chunks(config.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            step += 1;
            let rows: Vec<&[f64]> = chunk.iter().map(|&i| train.samples[i].values.as_slice()).collect();
            let x = model.batch_tensor(&rows)?;
            let eps = variant.is_variational().then(|| sample_eps(&mut rng, rows.len(), model.arch.latent_dim));
            let fwd = model.forward_generator(&x, eps.as_ref(), Mode::Train)?;
            model.commit_generator_stats(&fwd);

            let mut l_d = 0.0;
            for _ in 0..d_steps {
                if let Some(disc) = &mut model.discriminator {
                    disc.refresh_spectral();
                }
                let dg = model.discriminator_loss(&x, &fwd.x_hat, Mode::Train)?.expect("discriminator present");
                if !dg.loss.is_finite() {
                    return Err(diverged(epoch, step, "discriminator loss", &last_good));
                }
                l_d += dg.loss / d_steps as f64;
                model.commit_discriminator_stats(&dg);
                let disc = model.discriminator.as_mut().expect("discriminator present");
                let opt = model.optimizers.as_mut().and_then(|o| o.discriminator.as_mut()).expect("optimizer present");
                apply(opt, disc.params_mut(), &dg.grads, (epoch, step, "discriminator", &last_good))?;
                disc.converge_spectral(SPECTRAL_TOL, SPECTRAL_MAX_ITER);
            }

            if let Some(disc) = &mut model.discriminator {
                disc.refresh_spectral();
            }
            let gg = model.generator_loss(&fwd, weights, Mode::Train)?;
            if !gg.parts.total.is_finite() {
                return Err(diverged(epoch, step, "generator loss", &last_good));
            }
            let opts = model.optimizers.as_mut().expect("optimizers present");
            apply(&mut opts.encoder, model.encoder.params_mut(), &gg.encoder, (epoch, step, "encoder", &last_good))?;
            apply(&mut opts.decoder, model.decoder.params_mut(), &gg.decoder, (epoch, step, "decoder", &last_good))?;

            let record = LossRecord {
                epoch,
                step,
                l_d,
                l_adv: gg.parts.adv,
                l_rec: gg.parts.rec,
                l_kl: gg.parts.kl,
                l_g: gg.parts.total,
            };
            for (s, v) in sums.iter_mut().zip([l_d, record.l_adv, record.l_rec, record.l_kl, record.l_g]) {
                *s += v;
            }
            steps += 1;
            observer.on_step(&record);
        }
        model.epoch = epoch;
        let k = steps.max(1) as f64;
        let summary = EpochSummary {
            epoch,
            steps,
            l_d: sums[0] / k,
            l_adv: sums[1] / k,
            l_rec: sums[2] / k,
            l_kl: sums[3] / k,
            l_g: sums[4] / k,
            seconds: started.elapsed().as_secs_f64(),
        };
        observer.on_epoch(&summary)?;
        outcome.epochs.push(summary);

        if config.is_validation_epoch(epoch) {
            let mut written = None;
            if let Some(dir) = &options.checkpoint_dir {
                let path = dir.join(checkpoint_name(epoch));
                Checkpoint::from_model(model, config, false).save(&path)?;
                outcome.checkpoints.push((epoch, path.clone()));
                last_good = Some(path.clone());
                written = Some(path);
            }
            observer.on_validation(model, epoch, written.as_deref())?;
        }
    }
    if let Some(dir) = &options.checkpoint_dir {
        Checkpoint::from_model(model, config, true).save(dir.join("last.ckpt"))?;
    }
    Ok(outcome)
}
