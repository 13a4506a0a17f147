//! Experiment runner around `abft-core`: configuration, checkpoints, CSV
//! and image exports, and the pretrain / finetune / eval pipeline behind the
//! `abft` binary.

use std::path::{Path, PathBuf};

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod export;
pub mod manifest;
pub mod pipeline;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError};
pub use config::ExperimentConfig;

#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },
    #[error(transparent)]
    Core(abft_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Checkpoint {
        path: PathBuf,
        #[source]
        source: CheckpointError,
    },
    #[error("csv export failed: {0}")]
    Csv(#[from] csv::Error),
    #[error("image export failed: {0}")]
    Image(#[from] image::ImageError),
    #[error("base checkpoint rejected: {0}")]
    Gate(String),
}

impl From<abft_core::Error> for LabError {
    fn from(e: abft_core::Error) -> Self {
        match e {
            abft_core::Error::Config { field, reason } => LabError::Config { field, reason },
            other => LabError::Core(other),
        }
    }
}

impl LabError {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        LabError::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        LabError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Process exit code: 2 usage/config, 3 data, 4 contract violation.
    pub fn exit_code(&self) -> u8 {
        use abft_core::Error as E;
        match self {
            LabError::Usage(_) | LabError::Config { .. } => 2,
            LabError::Core(E::Data(_) | E::Parse { .. } | E::Length { .. }) => 3,
            LabError::Io { .. } | LabError::Checkpoint { .. } | LabError::Csv(_) | LabError::Image(_) => 3,
            LabError::Core(_) | LabError::Gate(_) => 4,
        }
    }
}

pub type Result<T, E = LabError> = std::result::Result<T, E>;
