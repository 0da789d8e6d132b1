//! Minimal reverse-mode building blocks for 1-D convolutional networks.
//!
//! Every layer exposes a pure `forward` that returns a cache and a
//! `backward` that consumes it, so the same network can be run several times
//! before any gradient is taken.

pub mod layers;
pub mod network;
pub mod optim;
pub mod spectral;
pub mod tensor;

pub use layers::{sigmoid, Layer, LayerSpec, LayerState, Mode, RunningStats, WeightNorm};
pub use network::{Grads, Network, Tape};
pub use optim::{GradientDiagnostics, OptimizerConfig, OptimizerKind, OptimizerState};
pub use spectral::{spectral_normalize, SpectralOutput, SpectralState};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid layer spec: {0}")]
    Spec(String),
    #[error("non-finite gradient at step {} (tensor {}, index {}): {}", .0.step, .0.tensor, .0.index, .0.value)]
    NonFiniteGradient(GradientDiagnostics),
}
