use thiserror::Error;

/// Errors produced by occkit operations.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid spec: {0}")]
    InvalidSpec(String),

    #[error("data length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("non-finite value at position {0}")]
    NonFinite(usize),

    #[error("grid spec mismatch between {0}")]
    SpecMismatch(&'static str),

    #[error("index ({i}, {j}, {k}) out of bounds for dims {dims:?}")]
    IndexOutOfBounds {
        i: usize,
        j: usize,
        k: usize,
        dims: [usize; 3],
    },

    #[error("invalid argument `{arg}`: {reason}")]
    InvalidArgument { arg: &'static str, reason: String },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("not a rigid transform: {0}")]
    NonRigid(String),

    #[error("frame mismatch: cannot chain `{left}` after `{right}`")]
    FrameMismatch { left: String, right: String },

    #[error("malformed {format} data: {reason}")]
    Format {
        format: &'static str,
        reason: String,
    },

    #[error("empty evaluation set: {0}")]
    Empty(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(arg: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidArgument {
        arg,
        reason: reason.into(),
    }
}
