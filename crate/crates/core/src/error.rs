use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid corpus spec: {0}")]
    InvalidSpec(String),
    #[error("manifest line {line}: {msg}")]
    ManifestLine { line: usize, msg: String },
    #[error("record {id}: image file missing at {path}")]
    MissingImage { id: u64, path: PathBuf },
    #[error("unknown token `{0}`")]
    UnknownToken(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("image codec: {0}")]
    Image(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Missing or unreadable inputs, as opposed to bad arguments or numerical failures.
    pub fn is_artifact_error(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::ManifestLine { .. }
                | Error::MissingImage { .. }
                | Error::Checkpoint(_)
                | Error::Image(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
