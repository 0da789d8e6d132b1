//! One-class anomaly detection for univariate time series with an
//! adversarially regularized variational autoencoder.

pub mod composer;
pub mod data;
pub mod error;
pub mod latent;
pub mod metrics;
pub mod model;
pub mod scoring;

pub use error::{CoreError, Result};
