use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument outside the mathematical domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A numerically degenerate configuration, e.g. a singular innovation covariance.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// The caller violated an API contract.
    #[error("usage error: {0}")]
    Usage(String),

    /// Malformed input file. `line` is 1-based; 0 means the error is not tied to a line.
    #[error("format error{}: {msg}", if *.line > 0 { format!(" at line {line}") } else { String::new() })]
    Format { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn format(line: usize, msg: impl Into<String>) -> Self {
        Error::Format { line, msg: msg.into() }
    }
}
