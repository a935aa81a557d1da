use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CsnnError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CsnnError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("degenerate vector: norm {norm:e} is below {eps:e}")]
    DegenerateVector { norm: f64, eps: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed data in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CsnnError {
    pub fn dim(msg: impl Into<String>) -> Self {
        CsnnError::Dimension(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CsnnError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        CsnnError::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
