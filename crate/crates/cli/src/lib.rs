//! Configuration, execution, manifests and summaries for rostlab batch runs.

pub mod config;
pub mod manifest;
pub mod run;

pub use config::{ExperimentConfig, ExperimentKind};
pub use manifest::{read_manifest, replay, run_experiment, summarize, ReplayReport, RunManifest};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] rostlab::RostError),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    /// Process exit code: every error is a configuration or guard failure.
    pub fn exit_code(&self) -> i32 {
        2
    }
}

pub const EXIT_PASS: i32 = 0;
pub const EXIT_STAT_FAIL: i32 = 1;
pub const EXIT_ERROR: i32 = 2;
