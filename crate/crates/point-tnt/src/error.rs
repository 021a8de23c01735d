use std::fmt;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors emitted by the tensor core, geometry kernels, model and harnesses.
#[derive(Debug)]
pub enum Error {
    /// Two tensors (or a tensor and a parameter set) have incompatible shapes.
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A dimension-related precondition failed (empty axis, bad rank, ...).
    Dimension(String),
    /// An argument is out of its documented range.
    Argument(String),
    /// Input is degenerate (all points identical, empty cloud, ...).
    Degenerate(String),
    /// A numeric failure: non-finite values where finite ones are required.
    Numeric(String),
    /// API misuse (backward on a non-scalar, missing mode, ...).
    Usage(String),
    /// File or stream level failure.
    Io(std::io::Error),
    /// Malformed serialized data (bad magic, version, dtype, manifest).
    Format(String),
    /// JSON (de)serialization failure for configs and reports.
    Json(serde_json::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, lhs, rhs } => {
                write!(f, "{op}: incompatible shapes {lhs:?} and {rhs:?}")
            }
            Error::Dimension(msg) => write!(f, "dimension error: {msg}"),
            Error::Argument(msg) => write!(f, "invalid argument: {msg}"),
            Error::Degenerate(msg) => write!(f, "degenerate input: {msg}"),
            Error::Numeric(msg) => write!(f, "numeric failure: {msg}"),
            Error::Usage(msg) => write!(f, "usage error: {msg}"),
            Error::Io(e) => write!(f, "i/o error: {e}"),
            Error::Format(msg) => write!(f, "format error: {msg}"),
            Error::Json(e) => write!(f, "json error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            Error::Json(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e)
    }
}
