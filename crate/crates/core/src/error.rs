//! Error type shared across the library.

use std::fmt;

/// Library-wide error. Variants mirror the failure classes surfaced by the
/// public operations: shape conflicts, bad configuration, malformed data,
/// violated call contracts, training aborts, and I/O.
#[derive(Debug)]
pub enum Error {
    /// Tensor shapes do not conform; names both offending shapes.
    Dimension(String),
    /// Invalid configuration (e.g. top-k larger than expert count).
    Config(String),
    /// Malformed or out-of-range input data.
    Data(String),
    /// A caller-side contract was violated (e.g. non-scalar loss).
    Contract(String),
    /// Training aborted (e.g. NaN gradient); names the parameter.
    Train(String),
    Io(std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension(m) => write!(f, "dimension error: {m}"),
            Error::Config(m) => write!(f, "configuration error: {m}"),
            Error::Data(m) => write!(f, "data error: {m}"),
            Error::Contract(m) => write!(f, "contract error: {m}"),
            Error::Train(m) => write!(f, "training error: {m}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}
