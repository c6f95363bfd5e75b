//! Error types shared across the crate.

use thiserror::Error;

/// Unified error type for tensor math, file formats, and pipeline stages.
#[derive(Debug, Error)]
pub enum SgError {
    /// A non-finite value (NaN or infinity) appeared in an op output or gradient.
    #[error("non-finite value produced by op `{op}`{detail}")]
    NonFinite { op: &'static str, detail: String },

    /// Tensor shapes incompatible with the requested op.
    #[error("shape mismatch in op `{op}`: {detail}")]
    Shape { op: &'static str, detail: String },

    /// An argument outside the op's domain (bad axis, empty input, bad range).
    #[error("invalid argument to `{op}`: {detail}")]
    Invalid { op: &'static str, detail: String },

    /// Malformed or unreadable data file (tensor container, manifest, checkpoint).
    #[error("data error in {path}: {detail}")]
    Data { path: String, detail: String },

    /// Configuration rejected (unknown key, out-of-range value, missing field).
    #[error("config error: {detail}")]
    Config { detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl SgError {
    pub fn non_finite(op: &'static str) -> Self {
        SgError::NonFinite {
            op,
            detail: String::new(),
        }
    }

    /// Non-finite error carrying context (step index, loss terms).
    pub fn non_finite_at(op: &'static str, detail: impl Into<String>) -> Self {
        SgError::NonFinite {
            op,
            detail: format!(": {}", detail.into()),
        }
    }

    pub fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        SgError::Invalid {
            op,
            detail: detail.into(),
        }
    }

    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        SgError::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn data(path: impl Into<String>, detail: impl Into<String>) -> Self {
        SgError::Data {
            path: path.into(),
            detail: detail.into(),
        }
    }

    pub fn config(detail: impl Into<String>) -> Self {
        SgError::Config {
            detail: detail.into(),
        }
    }

    /// Process exit code for the CLI: 1 usage, 2 data/format, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            SgError::NonFinite { .. } => 3,
            SgError::Shape { .. } | SgError::Invalid { .. } => 1,
            SgError::Data { .. } | SgError::Io(_) | SgError::Json(_) => 2,
            SgError::Config { .. } => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, SgError>;
