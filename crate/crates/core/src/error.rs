//! Crate-wide error type.
//!
//! Variants are grouped by the kind of failure rather than by module so the
//! CLI can map them onto its exit-code contract: configuration and usage
//! problems are caller errors, everything else is an operational failure.

use thiserror::Error;

/// Any failure produced by this crate.
#[derive(Debug, Error)]
pub enum Error {
    /// A shape or dimension constraint was violated when wiring an op.
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// An invalid model or training configuration (invariant violations,
    /// unknown presets, bad field values). `path` is a JSON-style pointer
    /// into the offending document where applicable.
    #[error("configuration error at {path}: {detail}")]
    Config { path: String, detail: String },

    /// Malformed input data (images, labels, datasets).
    #[error("data error: {0}")]
    Data(String),

    /// A malformed or corrupt serialized artifact (checkpoint, grid, PPM).
    /// `offset` is the byte position where parsing failed, when known.
    #[error("format error in {what} at byte {offset}: {detail}")]
    Format {
        what: &'static str,
        offset: u64,
        detail: String,
    },

    /// Training diverged or hit an unrecoverable numeric state.
    #[error("training error at step {step}: {detail}")]
    Train { step: u64, detail: String },

    /// An operation was invoked in a way its contract forbids
    /// (e.g. backward on a non-scalar).
    #[error("usage error: {0}")]
    Usage(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Helper for shape failures inside op builders.
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// Helper for configuration failures with a document path.
    pub fn config(path: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            detail: detail.into(),
        }
    }

    /// Helper attaching a file path to an IO error.
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// True for errors the CLI should classify as caller mistakes
    /// (exit code 2) rather than operational failures (exit code 1).
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Usage(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
