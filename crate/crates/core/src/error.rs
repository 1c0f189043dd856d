//! Crate-wide error type.
//!
//! Errors split into two families: usage/data problems the caller can fix
//! (bad files, bad config, mismatched inputs) and internal invariant
//! violations (shape bugs, numeric blowups). [`Error::is_usage`] reports the
//! family so a front end can map it to an exit code.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Incompatible tensor shapes for an op. Carries both shapes verbatim.
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// An API contract was violated (e.g. backward on a non-scalar).
    #[error("contract violation: {0}")]
    Contract(String),

    /// An input that must be non-empty was empty.
    #[error("empty input: {0}")]
    EmptyInput(String),

    /// A payload of one modality was handed to an encoder of another.
    #[error("modality mismatch: encoder expects {expected}, payload is {got}")]
    ModalityMismatch {
        expected: &'static str,
        got: &'static str,
    },

    /// I/O failure, with the path when known.
    #[error("io error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file did not parse as the expected on-disk format.
    #[error("format error: {0}")]
    Format(String),

    /// An invalid configuration value or combination.
    #[error("config error: {0}")]
    Config(String),

    /// A dataset-level problem: missing pair, bad record, unmatched ids.
    #[error("data error: {0}")]
    Data(String),

    /// A numeric failure: non-finite loss, negative eigenvalue, zero norm.
    #[error("numeric error: {0}")]
    Numeric(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Attach a path to a raw I/O error.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True when the error is something the user can fix (bad input, bad
    /// config, bad file) rather than an internal fault.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::EmptyInput(_)
                | Error::ModalityMismatch { .. }
                | Error::Io { .. }
                | Error::Format(_)
                | Error::Config(_)
                | Error::Data(_)
        )
    }
}
