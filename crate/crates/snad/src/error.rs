//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A tensor or mask dimension does not match what an operation requires.
    /// `what` names the offending dimension.
    #[error("shape mismatch in {what}: expected {expected}, got {got}")]
    ShapeMismatch {
        what: String,
        expected: String,
        got: String,
    },

    /// An argument is outside its documented domain.
    #[error("invalid argument {what}: {detail}")]
    InvalidArgument { what: &'static str, detail: String },

    /// Tape backward was asked to start from a non-scalar value.
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss([usize; 4]),

    /// A gradient probe produced a non-finite value at the given coordinate.
    #[error("non-finite value during gradient check at coordinate {coord}")]
    NonFiniteProbe { coord: usize },

    /// A numeric invariant was violated at runtime (training divergence etc.).
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Malformed or unsupported file content; `offset` is the byte position.
    #[error("{path}: parse error at byte {offset}: {detail}")]
    Parse {
        path: String,
        offset: usize,
        detail: String,
    },

    /// A label map pixel carried a value outside the 4-code alphabet.
    #[error("{path}: invalid label code {value} at pixel {index}")]
    BadLabelCode {
        path: String,
        value: u8,
        index: usize,
    },

    /// An identity that requires both regions was asked about a degenerate mask.
    #[error("empty region: {0}")]
    EmptyRegion(&'static str),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(what: impl Into<String>, expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            what: what.into(),
            expected: expected.into(),
            got: got.into(),
        }
    }

    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
