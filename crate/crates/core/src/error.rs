use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or corpus specification.
    #[error("configuration error: {0}")]
    Config(String),

    /// Bad input to an encoder, decoder or loss.
    #[error("input error: {0}")]
    Input(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("{path}: line {line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },

    #[error("{path}: line {line}: schema error: {message}")]
    Schema { path: PathBuf, line: usize, message: String },

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    /// A loss term became non-finite during training.
    #[error("divergence at epoch {epoch} step {step}: {term} loss is {value}")]
    Divergence { epoch: usize, step: usize, term: &'static str, value: f64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Usage and configuration problems, as opposed to runtime failures.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Input(_)
                | Error::Shape(_)
                | Error::Parse { .. }
                | Error::Schema { .. }
                | Error::Checkpoint { .. }
                | Error::Io { .. }
                | Error::Json(_)
        )
    }
}
