use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke a precondition (shape, layout or argument range).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A mathematical function was evaluated outside its domain.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("non-finite value in layer `{layer}`: {detail}")]
    Numerical { layer: String, detail: String },

    #[error("{path}: row {row}: {detail}")]
    Parse {
        path: PathBuf,
        row: usize,
        detail: String,
    },

    #[error("training diverged: {0}")]
    Training(String),

    #[error("group construction failed: {0}")]
    Grouping(String),

    #[error("crypto: {0}")]
    Crypto(String),

    #[error("decryption integrity check failed: {0}")]
    Integrity(String),

    #[error("malformed wire message: {0}")]
    Wire(String),

    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn numerical(layer: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numerical {
            layer: layer.into(),
            detail: detail.into(),
        }
    }
}
