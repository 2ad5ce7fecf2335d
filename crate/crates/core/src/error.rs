//! Crate-wide error type.

/// Errors surfaced by the library. Variants map onto the failure classes the
/// CLI turns into exit codes: parse errors, precondition violations and
/// numeric failures.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("invalid batch: {0}")]
    InvalidBatch(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid_argument(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn parse(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse { line, msg: msg.into() }
    }
}
