use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, band counts or spatial sizes that do not line up.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A value outside the domain of a function (e.g. a diverging series).
    #[error("domain error: {0}")]
    Domain(String),

    /// Singular or ill-conditioned linear algebra.
    #[error("numeric error: {msg} (condition estimate {condition:.3e})")]
    Numeric { msg: String, condition: f64 },

    /// Invalid configuration or parameter.
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed file contents.
    #[error("format error at byte {offset}: {msg}")]
    Format { msg: String, offset: u64 },

    /// A caller broke an operation precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Conflicting or missing command-line options.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Process exit status for this error kind.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Config(_) | Error::Dimension(_) | Error::Contract(_) => 2,
            Error::Format { .. } | Error::Io { .. } => 3,
            Error::Numeric { .. } | Error::Domain(_) => 4,
        }
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format { msg: msg.into(), offset }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
