//! Staged experiment pipeline behind the `cfdialog` binary.
//!
//! Each stage writes into its own directory under the run directory together
//! with a `manifest.json` that records the config fingerprint and the SHA-256
//! of every input and output file.

pub mod config;
pub mod manifest;
pub mod pipeline;

pub use cfdialog_core as core;
pub use config::ExperimentConfig;
pub use pipeline::{run_stage, Run, Stage};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad config, bad arguments or a missing upstream stage.
    #[error("{0}")]
    Validation(String),
    #[error(transparent)]
    Runtime(#[from] anyhow::Error),
}

impl From<cfdialog_core::Error> for CliError {
    fn from(e: cfdialog_core::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}
