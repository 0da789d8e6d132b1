//! Checkpoint container.
//!
//! Layout: 8 magic bytes, a little-endian `u32` format version, a
//! little-endian `u64` length followed by that many bytes of JSON metadata
//! (architecture, variant, training config, epoch), then the bincode-encoded
//! weights (per-layer parameters, spectral-norm vectors, batch-norm running
//! statistics and, optionally, optimizer state).

use std::io::{Read, Write};
use std::path::Path;

use anodae_nn::LayerState;
use serde::{Deserialize, Serialize};

use super::{ArchSpec, ModelState, Optimizers, TrainConfig, Variant};
use crate::error::{CoreError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ANODAECK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub arch: ArchSpec,
    pub variant: Variant,
    pub train: TrainConfig,
    pub epoch: usize,
    pub has_optimizer_state: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Weights {
    encoder: Vec<LayerState>,
    decoder: Vec<LayerState>,
    discriminator: Option<Vec<LayerState>>,
    optimizers: Option<Optimizers>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    weights: Weights,
}

impl Checkpoint {
    pub fn from_model(model: &ModelState, train: &TrainConfig, with_optimizer: bool) -> Self {
        let optimizers = if with_optimizer { model.optimizers.clone() } else { None };
        Self {
            meta: CheckpointMeta {
                arch: model.arch.clone(),
                variant: model.variant,
                train: train.clone(),
                epoch: model.epoch,
                has_optimizer_state: optimizers.is_some(),
            },
            weights: Weights {
                encoder: model.encoder.state(),
                decoder: model.decoder.state(),
                discriminator: model.discriminator.as_ref().map(|d| d.state()),
                optimizers,
            },
        }
    }

    pub fn into_model(self) -> Result<ModelState> {
        let mut model = ModelState::new(self.meta.arch, self.meta.variant, 0)?;
        model.encoder.load_state(self.weights.encoder)?;
        model.decoder.load_state(self.weights.decoder)?;
        match (&mut model.discriminator, self.weights.discriminator) {
            (Some(d), Some(state)) => d.load_state(state)?,
            (None, None) => {}
            _ => return Err(CoreError::Checkpoint("discriminator presence does not match the variant".into())),
        }
        model.optimizers = self.weights.optimizers;
        model.epoch = self.meta.epoch;
        Ok(model)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let meta = serde_json::to_vec(&self.meta)?;
        let body = bincode::serialize(&self.weights).map_err(|e| CoreError::Checkpoint(e.to_string()))?;
        let io = |e: std::io::Error| CoreError::Checkpoint(e.to_string());
        w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&(meta.len() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&meta).map_err(io)?;
        w.write_all(&body).map_err(io)?;
        Ok(())
    }

    fn read_meta(r: &mut impl Read) -> Result<CheckpointMeta> {
        let io = |e: std::io::Error| CoreError::Checkpoint(format!("truncated checkpoint: {e}"));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(CoreError::Checkpoint("not a checkpoint file".into()));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word).map_err(io)?;
        let version = u32::from_le_bytes(word);
        if version != CHECKPOINT_VERSION {
            return Err(CoreError::Checkpoint(format!("unsupported format version {version}")));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len).map_err(io)?;
        let mut meta = vec![0u8; u64::from_le_bytes(len) as usize];
        r.read_exact(&mut meta).map_err(io)?;
        Ok(serde_json::from_slice(&meta)?)
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let meta = Self::read_meta(&mut r)?;
        let weights: Weights = bincode::deserialize_from(r).map_err(|e| CoreError::Checkpoint(e.to_string()))?;
        Ok(Self { meta, weights })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("ckpt.tmp");
        let file = std::fs::File::create(&tmp).map_err(|e| CoreError::io(&tmp, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush().map_err(|e| CoreError::io(&tmp, e))?;
        drop(w);
        std::fs::rename(&tmp, path).map_err(|e| CoreError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path)
            .map_err(|e| CoreError::Checkpoint(format!("cannot open {}: {e}", path.display())))?;
        Self::read_from(std::io::BufReader::new(file))
    }

    /// Reads only the metadata block.
    pub fn load_meta(path: impl AsRef<Path>) -> Result<CheckpointMeta> {
        let path = path.as_ref();
        let file = std::fs::File::open(path)
            .map_err(|e| CoreError::Checkpoint(format!("cannot open {}: {e}", path.display())))?;
        Self::read_meta(&mut std::io::BufReader::new(file))
    }
}
