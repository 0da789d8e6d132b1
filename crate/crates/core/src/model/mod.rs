//! Encoder, decoder and discriminator of the adversarial autoencoder
//! family, their losses and the training loop.

mod arch;
mod checkpoint;
pub mod losses;
mod train;

use anodae_nn::{Grads, Mode, Network, OptimizerState, Tape, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use arch::{ArchSpec, OutputActivation, ReconLoss, Variant};
pub use checkpoint::{Checkpoint, CheckpointMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use train::{
    checkpoint_name, train, EpochSummary, LossRecord, NoopObserver, TrainConfig, TrainObserver, TrainOutcome, TrainOptions,
};

use crate::error::{CoreError, Result};
use losses::{bce_mean, clamp_log_sigma, discriminator_bce, feature_matching, kl_standard_normal, mse_mean};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Optimizers {
    pub encoder: OptimizerState,
    pub decoder: OptimizerState,
    pub discriminator: Option<OptimizerState>,
}

/// Weights of all three networks plus optional optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub arch: ArchSpec,
    pub variant: Variant,
    pub encoder: Network,
    pub decoder: Network,
    pub discriminator: Option<Network>,
    pub optimizers: Option<Optimizers>,
    /// Completed training epochs.
    pub epoch: usize,
}

/// Diagonal Gaussian posterior; `log_sigma` is absent for deterministic
/// encoders.
#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    /// `[batch, latent]`
    pub mu: Tensor,
    pub log_sigma: Option<Tensor>,
}

impl Posterior {
    pub fn sigma(&self) -> Option<Tensor> {
        self.log_sigma.as_ref().map(|ls| ls.map(f64::exp))
    }
}

/// Per-batch loss weights of the generator objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub beta: f64,
    pub nu: f64,
}

/// Everything the generator backward pass needs from its forward pass.
#[derive(Debug, Clone)]
pub struct GeneratorForward {
    pub x: Tensor,
    pub x_hat: Tensor,
    pub z: Tensor,
    pub posterior: Posterior,
    eps: Option<Vec<f64>>,
    log_sigma_mask: Vec<bool>,
    enc_tape: Tape,
    dec_tape: Tape,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct GeneratorLossParts {
    pub adv: f64,
    pub rec: f64,
    pub kl: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct GeneratorGrads {
    pub parts: GeneratorLossParts,
    pub encoder: Grads,
    pub decoder: Grads,
}

#[derive(Debug, Clone)]
pub struct DiscriminatorGrads {
    pub loss: f64,
    pub grads: Grads,
    tapes: [Tape; 2],
}

/// Discriminator outputs and concatenated feature activations per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorView {
    pub scores: Vec<f64>,
    pub features: Vec<Vec<f64>>,
}

/// Standard-normal draws for the reparameterization trick.
pub fn sample_eps<R: Rng + ?Sized>(rng: &mut R, batch: usize, latent: usize) -> Tensor {
    let data = (0..batch * latent).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(vec![batch, latent], data).expect("shape matches data")
}

/// `z = mu + sigma * eps`.
pub fn reparameterize(mu: &Tensor, sigma: &Tensor, eps: &Tensor) -> Result<Tensor> {
    if mu.shape() != sigma.shape() || mu.shape() != eps.shape() {
        return Err(CoreError::contract("mu, sigma and eps must share a shape"));
    }
    let data = mu.data().iter().zip(sigma.data()).zip(eps.data()).map(|((m, s), e)| m + s * e).collect();
    Ok(Tensor::new(mu.shape().to_vec(), data)?)
}

impl ModelState {
    pub fn new(arch: ArchSpec, variant: Variant, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (encoder, decoder, discriminator) = arch.build(variant, &mut rng)?;
        Ok(Self { arch, variant, encoder, decoder, discriminator, optimizers: None, epoch: 0 })
    }

    pub fn latent_dim(&self) -> usize {
        self.arch.latent_dim
    }

    pub fn param_count(&self) -> usize {
        self.encoder.param_count()
            + self.decoder.param_count()
            + self.discriminator.as_ref().map_or(0, Network::param_count)
    }

    /// Stacks [0, 1] series into a `[batch, 1, seq_len]` input in model space.
    pub fn batch_tensor<R: AsRef<[f64]>>(&self, rows: &[R]) -> Result<Tensor> {
        if rows.is_empty() {
            return Err(CoreError::contract("empty batch"));
        }
        let mut data = Vec::with_capacity(rows.len() * self.arch.seq_len);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != self.arch.seq_len {
                return Err(CoreError::contract(format!(
                    "row {i} has length {}, model expects {}",
                    r.len(),
                    self.arch.seq_len
                )));
            }
            data.extend(r.iter().map(|&v| self.variant.to_model_space(v)));
        }
        Ok(Tensor::new(vec![rows.len(), 1, self.arch.seq_len], data)?)
    }

    fn split_head(&self, head: &Tensor) -> Result<(Tensor, Option<Tensor>, Vec<bool>)> {
        let (n, l) = (head.batch(), self.arch.latent_dim);
        if !self.variant.is_variational() {
            return Ok((head.clone(), None, Vec::new()));
        }
        let mut mu = Vec::with_capacity(n * l);
        let mut raw = Vec::with_capacity(n * l);
        for row in head.rows() {
            mu.extend_from_slice(&row[..l]);
            raw.extend_from_slice(&row[l..]);
        }
        let (ls, mask) = clamp_log_sigma(&raw);
        Ok((Tensor::new(vec![n, l], mu)?, Some(Tensor::new(vec![n, l], ls)?), mask))
    }

    pub fn encode(&self, x: &Tensor, mode: Mode) -> Result<Posterior> {
        let (head, _) = self.encoder.forward(x, mode)?;
        let (mu, log_sigma, _) = self.split_head(&head)?;
        Ok(Posterior { mu, log_sigma })
    }

    /// `[batch, latent]` to `[batch, 1, seq_len]` in the output range.
    pub fn decode(&self, z: &Tensor, mode: Mode) -> Result<Tensor> {
        if z.shape().len() != 2 || z.shape()[1] != self.arch.latent_dim {
            return Err(CoreError::contract(format!(
                "latent batch must be [n, {}], got {:?}",
                self.arch.latent_dim,
                z.shape()
            )));
        }
        Ok(self.decoder.forward(z, mode)?.0)
    }

    /// `None` for variants without a discriminator.
    pub fn discriminator_features(&self, x: &Tensor, mode: Mode) -> Result<Option<DiscriminatorView>> {
        let Some(disc) = &self.discriminator else { return Ok(None) };
        let (out, tape) = disc.forward(x, mode)?;
        Ok(Some(DiscriminatorView { scores: out.into_data(), features: tape.features() }))
    }

    /// Encoder and decoder forward pass. With `eps` the latent is sampled by
    /// reparameterization; without it (or for deterministic encoders) the
    /// posterior mean is decoded.
    pub fn forward_generator(&self, x: &Tensor, eps: Option<&Tensor>, mode: Mode) -> Result<GeneratorForward> {
        let (head, enc_tape) = self.encoder.forward(x, mode)?;
        let (mu, log_sigma, log_sigma_mask) = self.split_head(&head)?;
        let (z, eps) = match (&log_sigma, eps) {
            (Some(ls), Some(e)) => {
                let sigma = ls.map(f64::exp);
                (reparameterize(&mu, &sigma, e)?, Some(e.data().to_vec()))
            }
            _ => (mu.clone(), None),
        };
        let (x_hat, dec_tape) = self.decoder.forward(&z, mode)?;
        Ok(GeneratorForward {
            x: x.clone(),
            x_hat,
            z,
            posterior: Posterior { mu, log_sigma },
            eps,
            log_sigma_mask,
            enc_tape,
            dec_tape,
        })
    }

    /// Generator objective `L_adv + nu * (L_rec + beta * KL)` and its
    /// gradients for the encoder and decoder. The discriminator is run in
    /// `disc_mode` and is not updated.
    pub fn generator_loss(&self, fwd: &GeneratorForward, weights: LossWeights, disc_mode: Mode) -> Result<GeneratorGrads> {
        let n = fwd.x.batch();
        let (rec, rec_grad) = match self.variant.recon_loss() {
            ReconLoss::Bce => bce_mean(fwd.x.data(), fwd.x_hat.data()),
            ReconLoss::Mse => mse_mean(fwd.x.data(), fwd.x_hat.data()),
        };
        let mut g_xhat = Tensor::new(fwd.x_hat.shape().to_vec(), rec_grad.into_iter().map(|g| weights.nu * g).collect())?;

        let mut adv = 0.0;
        if let Some(disc) = &self.discriminator {
            let (_, real) = disc.forward(&fwd.x, disc_mode)?;
            let (_, fake) = disc.forward(&fwd.x_hat, disc_mode)?;
            let mut tap_grads = Vec::with_capacity(real.taps().len());
            for (a, b) in real.taps().iter().zip(fake.taps()) {
                let (l, g) = feature_matching(a.data(), b.data(), n);
                adv += l;
                tap_grads.push(Tensor::new(b.shape().to_vec(), g)?);
            }
            let g_adv = disc.backward(&fake, None, &tap_grads, None)?;
            g_xhat.add_assign(&g_adv);
        }

        let mut decoder = self.decoder.zero_grads();
        let g_z = self.decoder.backward(&fwd.dec_tape, Some(&g_xhat), &[], Some(&mut decoder))?;

        let mut encoder = self.encoder.zero_grads();
        let mut kl = 0.0;
        let head_grad = match &fwd.posterior.log_sigma {
            None => g_z,
            Some(ls) => {
                let (k, g_mu_kl, g_ls_kl) = kl_standard_normal(fwd.posterior.mu.data(), ls.data());
                kl = k;
                let w = weights.nu * weights.beta;
                let l = self.arch.latent_dim;
                let mut head = Vec::with_capacity(n * 2 * l);
                for i in 0..n {
                    let row = i * l..(i + 1) * l;
                    for j in row.clone() {
                        head.push(g_z.data()[j] + w * g_mu_kl[j]);
                    }
                    for j in row {
                        let through_z = match &fwd.eps {
                            Some(eps) => g_z.data()[j] * ls.data()[j].exp() * eps[j],
                            None => 0.0,
                        };
                        let g = through_z + w * g_ls_kl[j];
                        head.push(if fwd.log_sigma_mask[j] { g } else { 0.0 });
                    }
                }
                Tensor::new(vec![n, 2 * l], head)?
            }
        };
        self.encoder.backward(&fwd.enc_tape, Some(&head_grad), &[], Some(&mut encoder))?;
        let total = adv + weights.nu * (rec + weights.beta * kl);
        Ok(GeneratorGrads { parts: GeneratorLossParts { adv, rec, kl, total }, encoder, decoder })
    }

    /// Discriminator cross-entropy on real `x` and (detached) `x_hat`, with
    /// gradients for the discriminator parameters.
    pub fn discriminator_loss(&self, x: &Tensor, x_hat: &Tensor, mode: Mode) -> Result<Option<DiscriminatorGrads>> {
        let Some(disc) = &self.discriminator else { return Ok(None) };
        let (d_real, real) = disc.forward(x, mode)?;
        let (d_fake, fake) = disc.forward(x_hat, mode)?;
        let (loss, g_real, g_fake) = discriminator_bce(d_real.data(), d_fake.data());
        let mut grads = disc.zero_grads();
        disc.backward(&real, Some(&Tensor::new(d_real.shape().to_vec(), g_real)?), &[], Some(&mut grads))?;
        disc.backward(&fake, Some(&Tensor::new(d_fake.shape().to_vec(), g_fake)?), &[], Some(&mut grads))?;
        Ok(Some(DiscriminatorGrads { loss, grads, tapes: [real, fake] }))
    }

    /// Folds batch-norm statistics of a training-mode generator pass into the
    /// running estimates.
    pub fn commit_generator_stats(&mut self, fwd: &GeneratorForward) {
        self.encoder.commit_batch_stats(&fwd.enc_tape);
        self.decoder.commit_batch_stats(&fwd.dec_tape);
    }

    pub fn commit_discriminator_stats(&mut self, d: &DiscriminatorGrads) {
        if let Some(disc) = &mut self.discriminator {
            for tape in &d.tapes {
                disc.commit_batch_stats(tape);
            }
        }
    }

    /// Posterior-mean reconstruction in eval mode.
    pub fn reconstruct(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let fwd = self.forward_generator(x, None, Mode::Eval)?;
        Ok((fwd.posterior.mu, fwd.x_hat))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> ModelState {
        let arch = ArchSpec { seq_len: 16, latent_dim: 2, channels: vec![2, 3], disc_channels: vec![2, 3], ..Default::default() };
        ModelState::new(arch, Variant::Anodae, 4).unwrap()
    }

    #[test]
    fn encode_shapes_and_positive_sigma() {
        let m = ModelState::new(ArchSpec::default(), Variant::Anodae, 1).unwrap();
        let rows: Vec<Vec<f64>> = (0..4).map(|i| (0..160).map(|t| ((t + i) as f64 * 0.1).sin() * 0.5 + 0.5).collect()).collect();
        let x = m.batch_tensor(&rows).unwrap();
        let post = m.encode(&x, Mode::Eval).unwrap();
        assert_eq!(post.mu.shape(), &[4, 6]);
        let sigma = post.sigma().unwrap();
        assert_eq!(sigma.shape(), &[4, 6]);
        assert!(sigma.data().iter().all(|&s| s > 0.0));
        let same = m.batch_tensor(&[rows[0].clone(), rows[0].clone()]).unwrap();
        let p = m.encode(&same, Mode::Eval).unwrap();
        assert_eq!(p.mu.row(0), p.mu.row(1));
    }

    #[test]
    fn decode_range() {
        let m = ModelState::new(ArchSpec::default(), Variant::Anodae, 2).unwrap();
        let z = Tensor::new(vec![1, 6], vec![3.0, -2.0, 0.5, 1.0, -4.0, 0.0]).unwrap();
        let x_hat = m.decode(&z, Mode::Eval).unwrap();
        assert_eq!(x_hat.shape(), &[1, 1, 160]);
        assert!(x_hat.data().iter().all(|&v| v > 0.0 && v < 1.0));
        let tanh = ModelState::new(ArchSpec::default(), Variant::Beatgan, 2).unwrap();
        let y = tanh.decode(&z, Mode::Eval).unwrap();
        assert!(y.data().iter().all(|&v| v > -1.0 && v < 1.0));
        assert!(m.decode(&Tensor::zeros(vec![1, 5]), Mode::Eval).is_err());
    }

    #[test]
    fn reparameterize_limits() {
        let mu = Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let eps = Tensor::new(vec![1, 3], vec![0.3, -1.0, 2.0]).unwrap();
        assert_eq!(reparameterize(&mu, &Tensor::zeros(vec![1, 3]), &eps).unwrap(), mu);
        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(sample_eps(&mut a, 2, 3), sample_eps(&mut b, 2, 3));
    }

    #[test]
    fn reparameterized_draws_are_standard_normal() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let n = 100_000;
        let eps = sample_eps(&mut rng, n, 2);
        let z = reparameterize(&Tensor::zeros(vec![n, 2]), &Tensor::full(vec![n, 2], 1.0), &eps).unwrap();
        for d in 0..2 {
            let col: Vec<f64> = z.rows().map(|r| r[d]).collect();
            let mean = col.iter().sum::<f64>() / n as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            assert!(mean.abs() < 0.02 && (var - 1.0).abs() < 0.05, "{mean} {var}");
        }
    }

    #[test]
    fn features_are_deterministic_and_sized() {
        let m = toy();
        let x = m.batch_tensor(&[vec![0.5; 16], vec![0.5; 16]]).unwrap();
        let v = m.discriminator_features(&x, Mode::Eval).unwrap().unwrap();
        assert_eq!(v.features[0], v.features[1]);
        assert_eq!(v.features[0].len(), 2 * 8 + 3 * 4);
        assert!(v.scores.iter().all(|&s| s > 0.0 && s < 1.0));
    }

    #[test]
    fn plain_autoencoder_objective_is_bce() {
        let arch = ArchSpec { seq_len: 16, latent_dim: 2, channels: vec![2, 3], disc_channels: vec![2], ..Default::default() };
        let m = ModelState::new(arch, Variant::Ae, 3).unwrap();
        let rows = vec![(0..16).map(|t| t as f64 / 15.0).collect::<Vec<_>>()];
        let x = m.batch_tensor(&rows).unwrap();
        let fwd = m.forward_generator(&x, None, Mode::Train).unwrap();
        let g = m.generator_loss(&fwd, LossWeights { beta: 0.0, nu: 1.0 }, Mode::Train).unwrap();
        let direct: f64 = x
            .data()
            .iter()
            .zip(fwd.x_hat.data())
            .map(|(t, p)| -(t * p.ln() + (1.0 - t) * (1.0 - p).ln()))
            .sum::<f64>()
            / 16.0;
        assert_eq!(g.parts.adv, 0.0);
        assert_eq!(g.parts.total, direct);
    }
}
