use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: expected {expected}, got {got}")]
    Dimension {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("infeasible instance: {0}")]
    Infeasible(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::Dimension {
            op,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the numerics (NaN/Inf, divergence).
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite(_))
    }

    /// True for errors caused by bad user input or configuration.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Argument(_) | Error::Config(_) | Error::Dimension { .. } | Error::Infeasible(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
