//! Experiment harness: k-fold training, detection, evaluation and plot
//! export over self-describing run directories.

pub mod bench;
pub mod config;
pub mod detect;
pub mod evaluate;
pub mod events;
pub mod export;
pub mod run;
pub mod train;

pub use config::{ExperimentConfig, ValidationError};
pub use run::RunDir;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const VALIDATION: i32 = 1;
    pub const RUNTIME: i32 = 2;
}

/// Validation errors anywhere in the chain map to exit code 1.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.chain().any(|e| e.is::<ValidationError>()) {
        exit::VALIDATION
    } else {
        exit::RUNTIME
    }
}
