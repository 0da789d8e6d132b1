use std::path::PathBuf;

use anodae_nn::NnError;

pub type Result<T, E = CoreError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum CoreError {
    #[error("ingest error at row {row}: {reason}")]
    Ingest { row: usize, reason: String },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid resample target length {0} (must be at least 2)")]
    InvalidTarget(usize),
    #[error("degenerate value range: min {min} equals max {max}")]
    DegenerateRange { min: f64, max: f64 },
    #[error("cannot build splits: {0}")]
    Split(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("training diverged at epoch {epoch}, step {step}: non-finite {what}; last good checkpoint: {last_good:?}")]
    NonFiniteLoss { epoch: usize, step: usize, what: String, last_good: Option<PathBuf> },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CoreError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CoreError::Io { path: path.into(), source }
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        CoreError::Contract(msg.into())
    }
}
