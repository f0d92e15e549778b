//! CLI error type mapped onto process exit codes.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad invocation or configuration. Exit code 1.
    #[error("config error: {0}")]
    Usage(String),

    /// Unreadable, malformed, or inconsistent data. Exit code 2.
    #[error("data error: {0}")]
    Data(String),

    /// Numerical failure inside a computation. Exit code 3.
    #[error("numerical error: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl From<nperf_core::Error> for CliError {
    fn from(e: nperf_core::Error) -> Self {
        match e {
            nperf_core::Error::InvalidInput(m) => CliError::Data(m),
            nperf_core::Error::Numerical(m) => CliError::Numerical(m),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
