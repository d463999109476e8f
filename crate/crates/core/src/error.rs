use std::path::PathBuf;

/// Errors surfaced by every module of the crate.
///
/// Variants are grouped by the category the CLI reports: shape and numeric
/// problems, malformed data, configuration mistakes, and I/O.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("parameter `{0}` is frozen and cannot be updated")]
    FrozenParameter(String),

    #[error("malformed {what} at byte {offset}: {msg}")]
    Format {
        what: &'static str,
        offset: usize,
        msg: String,
    },

    #[error("checksum mismatch at byte {offset}: stored {stored:#018x}, computed {computed:#018x}")]
    Checksum { offset: usize, stored: u64, computed: u64 },

    #[error("token `{token}` is not in the vocabulary")]
    UnknownToken { token: String },

    #[error("invalid data: {0}")]
    Data(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument { op, msg: msg.into() }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Coarse category used for CLI exit codes and reports.
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::ShapeMismatch { .. }
            | Error::InvalidArgument { .. }
            | Error::NonFinite(_)
            | Error::FrozenParameter(_) => ErrorCategory::Numeric,
            Error::Format { .. }
            | Error::Checksum { .. }
            | Error::UnknownToken { .. }
            | Error::Data(_) => ErrorCategory::Data,
            Error::Config(_) => ErrorCategory::Config,
            Error::Io { .. } => ErrorCategory::Io,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Data,
    Io,
    Numeric,
}

impl ErrorCategory {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCategory::Config => "config",
            ErrorCategory::Data => "data",
            ErrorCategory::Io => "io",
            ErrorCategory::Numeric => "numeric",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
