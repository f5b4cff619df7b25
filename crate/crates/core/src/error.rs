use std::path::PathBuf;

use glitr_substrate::SubstrateError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GlitrError {
    #[error(transparent)]
    Substrate(#[from] SubstrateError),
    #[error("invalid geometry: {0}")]
    Geometry(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("sequence of {len} steps exceeds max_t = {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("label {label} outside 0..{classes}")]
    Label { label: usize, classes: usize },
    #[error("{0}: not found")]
    NotFound(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },
    #[error("generator version mismatch: found {found}, expected {expected}")]
    VersionMismatch { found: String, expected: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("non-finite loss ({0})")]
    NonFiniteLoss(String),
    #[error("missing {0}")]
    Missing(String),
    #[error("unknown strategy {0:?}")]
    UnknownStrategy(String),
    #[error("{0}")]
    Report(String),
    #[error("{0} already exists; pass --force to overwrite")]
    RunExists(PathBuf),
}

impl GlitrError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            GlitrError::NotFound(path)
        } else {
            GlitrError::Io { path, source }
        }
    }
}

pub type Result<T, E = GlitrError> = std::result::Result<T, E>;
