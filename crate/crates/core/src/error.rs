use std::path::PathBuf;

/// Errors raised by every fallible operation in the crate.
///
/// Each variant carries a stable code (`E_SHAPE`, `E_FORMAT`, ...) that the
/// command-line front end prints and maps to an exit status.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Format(String),
    #[error("payload holds {actual} bytes, header promises {expected}")]
    Truncated { expected: usize, actual: usize },
    #[error("{0}")]
    Arg(String),
    #[error("{0}")]
    Shape(String),
    #[error("{0}")]
    Numeric(String),
    #[error("{0}")]
    Config(String),
}

impl Error {
    pub fn code(&self) -> &'static str {
        match self {
            Error::Io { .. } => "E_IO",
            Error::Format(_) => "E_FORMAT",
            Error::Truncated { .. } => "E_TRUNCATED",
            Error::Arg(_) => "E_ARG",
            Error::Shape(_) => "E_SHAPE",
            Error::Numeric(_) => "E_NUMERIC",
            Error::Config(_) => "E_CONFIG",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Shape(format!($($arg)*))
    };
}
pub(crate) use shape_err;
