use std::path::PathBuf;

use autodiff::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid config at `{path}`: {message}")]
    Config { path: String, message: String },
    #[error("scene {seed}: rejection budget exhausted ({constraint})")]
    Generation { seed: u64, constraint: &'static str },
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("missing {what}: {}", path.display())]
    Missing { what: String, path: PathBuf },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn contract(message: impl Into<String>) -> Self {
        Error::Contract(message.into())
    }

    /// Stable one-word category for machine-readable reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Tensor(_) => "tensor",
            Error::Config { .. } => "config",
            Error::Generation { .. } => "generation",
            Error::Contract(_) => "contract",
            Error::Format(_) => "format",
            Error::Missing { .. } => "missing",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
