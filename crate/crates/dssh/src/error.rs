//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by every layer of the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Two tensors had incompatible shapes for an operation.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// An operation received an input outside its mathematical domain
    /// (negative input to log/sqrt, nonpositive scale parameter, ...).
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    /// A computation produced a non-finite value where one is not allowed.
    #[error("non-finite value in {at}: {detail}")]
    NonFinite { at: &'static str, detail: String },

    /// A named parameter was absent from the store.
    #[error("missing parameter '{0}'")]
    MissingParam(String),

    /// A configuration violated an invariant or failed schema validation.
    #[error("config error: {0}")]
    Config(String),

    /// A required input artifact (checkpoint, dataset, ...) was absent.
    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    /// Malformed input data (CSV rows, checkpoint framing, ...).
    #[error("data error: {0}")]
    Data(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn domain(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Domain {
            op,
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
