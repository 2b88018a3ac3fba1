use std::path::{Path, PathBuf};

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] dyninfer_core::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },
    #[error("{what}: bad magic bytes")]
    BadMagic { what: &'static str },
    #[error("{what}: unsupported version {found} (expected {expected})")]
    Version { what: &'static str, found: u32, expected: u32 },
    #[error("{what}: file is truncated")]
    Truncated { what: &'static str },
    #[error("{what}: {msg}")]
    Format { what: &'static str, msg: String },
    #[error("grid hash mismatch: policy built for {policy}, model has {model}")]
    HashMismatch { policy: String, model: String },
    #[error("{0}")]
    Invalid(String),
    #[error("training diverged at epoch {epoch}: non-finite loss; last good model kept")]
    Diverged { epoch: usize },
}

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io { path: path.to_path_buf(), source }
    }
}
