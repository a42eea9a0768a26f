use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    /// A loss or gradient became NaN/inf during training.
    #[error("non-finite value at iteration {iteration}{}: {detail}", head.map(|h| format!(", head {h}")).unwrap_or_default())]
    NonFinite {
        iteration: usize,
        head: Option<usize>,
        detail: String,
    },

    #[error("integrity error in {}: {reason}", path.display())]
    Integrity { path: PathBuf, reason: String },

    #[error("unsupported schema version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error in {}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("PNG error in {}: {reason}", path.display())]
    Png { path: PathBuf, reason: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn integrity(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Integrity {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
