use std::path::PathBuf;

use divcon_core::CoreError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("{path}: {err}")]
    Io { path: PathBuf, err: std::io::Error },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("config: {0}")]
    Config(String),
    #[error("missing artifact {0}")]
    Missing(PathBuf),
    #[error("non-finite state at step {step}: {what}")]
    NonFinite { step: usize, what: String },
    #[error("invalid argument: {0}")]
    Invalid(String),
    /// Displays the inner error inline, so it is not also exposed as a source.
    #[error("[{stage}] {inner}")]
    Stage { stage: &'static str, inner: Box<Error> },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            err: source,
        }
    }

    /// Attaches `path` to a core I/O failure.
    pub fn core_at(path: impl Into<PathBuf>, e: CoreError) -> Self {
        match e {
            CoreError::Io(io) => Error::io(path, io),
            other => other.into(),
        }
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                inner: Box::new(e),
            },
        }
    }
}
