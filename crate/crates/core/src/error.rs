use std::error;
use std::fmt;
use std::io;
use std::result;

/// A type alias for `Result<T, Error>`.
pub type Result<T> = result::Result<T, Error>;

/// Errors emitted by tensor, model and harness code.
#[derive(Debug)]
pub enum Error {
    /// Tensor shapes are incompatible for the requested operation.
    Shape { op: &'static str, detail: String },
    /// A scalar parameter is outside its valid range.
    Parameter { name: &'static str, detail: String },
    /// An input violates an operation precondition.
    Input(String),
    /// A configuration field failed validation.
    Config(String),
    /// An operation produced or encountered a non-finite / degenerate value.
    Numeric(String),
    /// A dataset record could not be loaded.
    Load { clip: String, detail: String },
    /// Underlying I/O failure.
    Io(io::Error),
    /// Malformed serialized data (tensor files, manifests, checkpoints).
    Format(String),
}

impl Error {
    /// Exit code classification used by the CLI: validation errors exit
    /// with 2, runtime failures with 1.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Shape { .. }
                | Error::Parameter { .. }
                | Error::Input(_)
                | Error::Config(_)
        )
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, detail } => write!(f, "shape error in {op}: {detail}"),
            Error::Parameter { name, detail } => write!(f, "invalid parameter {name}: {detail}"),
            Error::Input(msg) => write!(f, "invalid input: {msg}"),
            Error::Config(msg) => write!(f, "invalid configuration: {msg}"),
            Error::Numeric(msg) => write!(f, "numeric error: {msg}"),
            Error::Load { clip, detail } => write!(f, "failed to load clip '{clip}': {detail}"),
            Error::Io(err) => write!(f, "io error: {err}"),
            Error::Format(msg) => write!(f, "malformed data: {msg}"),
        }
    }
}

impl error::Error for Error {
    fn source(&self) -> Option<&(dyn error::Error + 'static)> {
        match self {
            Error::Io(err) => Some(err),
            _ => None,
        }
    }
}

impl From<io::Error> for Error {
    fn from(err: io::Error) -> Error {
        Error::Io(err)
    }
}
