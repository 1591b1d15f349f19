use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("bad file format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("truncated file {path}: expected {expected} bytes, found {found}")]
    Length {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("inconsistent files: {0}")]
    Consistency(String),

    #[error("training diverged ({context}): loss = {loss}")]
    Divergence { context: String, loss: f64 },

    #[error("no cluster survived filtering: {0}")]
    EmptyDistribution(String),

    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl FusionError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FusionError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        FusionError::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// Attaches a location prefix to a divergence error, leaving other errors untouched.
    pub fn in_context(self, prefix: impl std::fmt::Display) -> Self {
        match self {
            FusionError::Divergence { context, loss } => FusionError::Divergence {
                context: format!("{prefix}, {context}"),
                loss,
            },
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, FusionError>;

pub(crate) fn check_finite(loss: f64, context: impl FnOnce() -> String) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(FusionError::Divergence {
            context: context(),
            loss,
        })
    }
}
