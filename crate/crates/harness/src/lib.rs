//! Experiment harness: configuration, the method registry, orchestration,
//! metrics, and file export for the pairwise credit assignment experiments.

pub mod config;
pub mod export;
pub mod methods;
pub mod metrics;
pub mod runner;

use tca_core::diffmath::{DiffError, Mat};
use tca_core::CoreError;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] config::ConfigError),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Runtime(String),
    /// A run aborted mid-flight (non-finite values); carries the last good
    /// weight matrix so it can be written out for diagnosis.
    #[error("run aborted: {message}")]
    Abort { message: String, last_good_weights: Option<Mat> },
}

impl HarnessError {
    /// Process exit code: 1 for configuration errors, 2 for runtime aborts.
    pub fn exit_code(&self) -> u8 {
        match self {
            HarnessError::Config(_) => 1,
            _ => 2,
        }
    }
}
