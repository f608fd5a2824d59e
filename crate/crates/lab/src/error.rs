use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

pub type Result<T, E = LabError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("{0}")]
    Core(#[from] seqrec_core::Error),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("missing {artifact} ({path}); run `seqrec {command}` first")]
    MissingArtifact { artifact: String, path: PathBuf, command: String },
    #[error("{path} already exists; pass --force to overwrite or --if-changed to skip when inputs are unchanged")]
    Exists { path: PathBuf },
    #[error("inputs of {stage} changed since {path} was written; pass --force to overwrite")]
    Stale { stage: String, path: PathBuf },
    #[error("run directory is locked by {path}; remove it if no other process is running")]
    Locked { path: PathBuf },
}

impl LabError {
    pub fn io(path: impl AsRef<Path>, source: io::Error) -> Self {
        LabError::Io { path: path.as_ref().to_path_buf(), source }
    }

    pub fn format(path: impl AsRef<Path>, msg: impl Into<String>) -> Self {
        LabError::Format { path: path.as_ref().to_path_buf(), msg: msg.into() }
    }
}
