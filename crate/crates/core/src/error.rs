use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors produced by the engine.
///
/// The variants are grouped so that a front end can map them to distinct exit
/// statuses: configuration problems, data/format problems and numeric failures.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("numeric error in round {round}")]
    RoundFailed {
        round: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("finite-difference oracle produced a non-finite value at coordinate {0}")]
    Oracle(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: msg.into(),
        }
    }

    /// Coarse classification used for process exit codes.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Shape(_) | Error::Parameter(_) | Error::Config(_) => ErrorKind::Config,
            Error::Format { .. } | Error::Validation(_) | Error::Io(_) => ErrorKind::Data,
            Error::Numeric(_) | Error::RoundFailed { .. } | Error::Oracle(_) => ErrorKind::Numeric,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
}
