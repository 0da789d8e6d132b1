use anodae_nn::{LayerSpec, Network, OptimizerConfig};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Model family. The baselines share the encoder/decoder ladder and differ in
/// posterior, discriminator, output activation and reconstruction loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Anodae,
    Ae,
    Vae,
    Beatgan,
    BeatganPlus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    Sigmoid,
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconLoss {
    Bce,
    Mse,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Anodae, Variant::Ae, Variant::Vae, Variant::Beatgan, Variant::BeatganPlus];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Anodae => "anodae",
            Variant::Ae => "ae",
            Variant::Vae => "vae",
            Variant::Beatgan => "beatgan",
            Variant::BeatganPlus => "beatgan_plus",
        }
    }

    /// Gaussian posterior with a log-sigma head.
    pub fn is_variational(self) -> bool {
        matches!(self, Variant::Anodae | Variant::Vae)
    }

    pub fn has_discriminator(self) -> bool {
        matches!(self, Variant::Anodae | Variant::Beatgan | Variant::BeatganPlus)
    }

    pub fn spectral_discriminator(self) -> bool {
        matches!(self, Variant::Anodae | Variant::BeatganPlus)
    }

    pub fn discriminator_batch_norm(self) -> bool {
        self == Variant::Beatgan
    }

    pub fn output(self) -> OutputActivation {
        if self == Variant::Beatgan {
            OutputActivation::Tanh
        } else {
            OutputActivation::Sigmoid
        }
    }

    pub fn recon_loss(self) -> ReconLoss {
        match self.output() {
            OutputActivation::Sigmoid => ReconLoss::Bce,
            OutputActivation::Tanh => ReconLoss::Mse,
        }
    }

    pub fn default_d_steps(self) -> usize {
        match self {
            Variant::Anodae | Variant::BeatganPlus => 3,
            Variant::Beatgan => 1,
            Variant::Ae | Variant::Vae => 0,
        }
    }

    pub fn default_optimizer(self) -> OptimizerConfig {
        if self == Variant::Beatgan {
            OptimizerConfig::adam()
        } else {
            OptimizerConfig::adabelief()
        }
    }

    /// Maps a [0, 1] series into the range the networks work in.
    pub fn to_model_space(self, v: f64) -> f64 {
        match self.output() {
            OutputActivation::Sigmoid => v,
            OutputActivation::Tanh => 2.0 * v - 1.0,
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown variant {s:?}"))
    }
}

/// Layer widths of the three networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchSpec {
    pub seq_len: usize,
    pub latent_dim: usize,
    /// Encoder block widths; the decoder mirrors them.
    pub channels: Vec<usize>,
    /// Discriminator feature block widths.
    pub disc_channels: Vec<usize>,
    pub kernel: usize,
    pub leaky_slope: f64,
}

impl Default for ArchSpec {
    fn default() -> Self {
        Self {
            seq_len: 160,
            latent_dim: 6,
            channels: vec![16, 32, 64, 128, 256],
            disc_channels: vec![16, 32, 64, 128],
            kernel: 4,
            leaky_slope: 0.2,
        }
    }
}

impl ArchSpec {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: String| if ok { Ok(()) } else { Err(CoreError::contract(msg)) };
        check(self.latent_dim >= 1, "latent_dim must be positive".into())?;
        check(!self.channels.is_empty() && !self.disc_channels.is_empty(), "channel lists must be non-empty".into())?;
        check(self.kernel == 4, format!("stride-2 blocks need kernel 4, got {}", self.kernel))?;
        for (what, blocks) in [("channels", self.channels.len()), ("disc_channels", self.disc_channels.len())] {
            let factor = 1usize << blocks;
            check(
                self.seq_len % factor == 0 && self.seq_len / factor >= 1,
                format!("seq_len {} is not divisible by 2^{blocks} ({what})", self.seq_len),
            )?;
        }
        Ok(())
    }

    /// Sequence length at the narrow end of the encoder.
    pub fn base_len(&self) -> usize {
        self.seq_len >> self.channels.len()
    }

    fn disc_final_kernel(&self) -> usize {
        self.seq_len >> self.disc_channels.len()
    }

    pub fn encoder_specs(&self, variant: Variant) -> Vec<LayerSpec> {
        let mut specs = Vec::new();
        let mut in_ch = 1;
        for (i, &c) in self.channels.iter().enumerate() {
            if i == 0 {
                specs.push(LayerSpec::conv(in_ch, c, self.kernel, 2, 1));
            } else {
                specs.push(LayerSpec::conv(in_ch, c, self.kernel, 2, 1).without_bias());
                specs.push(LayerSpec::BatchNorm { channels: c });
            }
            specs.push(LayerSpec::LeakyRelu { slope: self.leaky_slope });
            in_ch = c;
        }
        let flat = in_ch * self.base_len();
        specs.push(LayerSpec::Reshape { shape: vec![flat] });
        let heads = if variant.is_variational() { 2 } else { 1 };
        specs.push(LayerSpec::linear(flat, heads * self.latent_dim));
        specs
    }

    pub fn decoder_specs(&self, variant: Variant) -> Vec<LayerSpec> {
        let last = *self.channels.last().expect("validated");
        let mut specs = vec![
            LayerSpec::Reshape { shape: vec![self.latent_dim, 1] },
            LayerSpec::transposed(self.latent_dim, last, self.base_len(), 1, 0).without_bias(),
            LayerSpec::BatchNorm { channels: last },
            LayerSpec::Relu,
        ];
        for i in (1..self.channels.len()).rev() {
            specs.push(LayerSpec::transposed(self.channels[i], self.channels[i - 1], self.kernel, 2, 1).without_bias());
            specs.push(LayerSpec::BatchNorm { channels: self.channels[i - 1] });
            specs.push(LayerSpec::Relu);
        }
        specs.push(LayerSpec::transposed(self.channels[0], 1, self.kernel, 2, 1));
        specs.push(match variant.output() {
            OutputActivation::Sigmoid => LayerSpec::Sigmoid,
            OutputActivation::Tanh => LayerSpec::Tanh,
        });
        specs
    }

    /// Feature blocks followed by a scoring convolution spanning the
    /// remaining length. Returns the specs and the feature tap indices.
    pub fn discriminator_specs(&self, variant: Variant) -> Result<(Vec<LayerSpec>, Vec<usize>)> {
        let spectral = variant.spectral_discriminator();
        let with_norm = |s: LayerSpec| if spectral { s.spectral().map_err(CoreError::from) } else { Ok(s) };
        let mut specs = Vec::new();
        let mut taps = Vec::new();
        let mut in_ch = 1;
        for (i, &c) in self.disc_channels.iter().enumerate() {
            let batch_norm = variant.discriminator_batch_norm() && i > 0;
            let mut conv = LayerSpec::conv(in_ch, c, self.kernel, 2, 1);
            if batch_norm {
                conv = conv.without_bias();
            }
            specs.push(with_norm(conv)?);
            if batch_norm {
                specs.push(LayerSpec::BatchNorm { channels: c });
            }
            specs.push(LayerSpec::LeakyRelu { slope: self.leaky_slope });
            taps.push(specs.len() - 1);
            in_ch = c;
        }
        specs.push(with_norm(LayerSpec::conv(in_ch, 1, self.disc_final_kernel(), 1, 0))?);
        specs.push(LayerSpec::Reshape { shape: vec![1] });
        specs.push(LayerSpec::Sigmoid);
        Ok((specs, taps))
    }

    pub fn build<R: Rng + ?Sized>(&self, variant: Variant, rng: &mut R) -> Result<(Network, Network, Option<Network>)> {
        self.validate()?;
        let encoder = Network::new(self.encoder_specs(variant), vec![1, self.seq_len], vec![], rng)?;
        let decoder = Network::new(self.decoder_specs(variant), vec![self.latent_dim], vec![], rng)?;
        let discriminator = if variant.has_discriminator() {
            let (specs, taps) = self.discriminator_specs(variant)?;
            Some(Network::new(specs, vec![1, self.seq_len], taps, rng)?)
        } else {
            None
        };
        Ok((encoder, decoder, discriminator))
    }
}
