//! Command failures and their process exit codes.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("io: {0}")]
    Io(String),
    #[error("config: {0}")]
    Config(String),
    #[error("numeric: {0}")]
    Numeric(String),
    #[error("check failed: {0}")]
    Acceptance(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub const EXIT_IO: i32 = 1;
    pub const EXIT_CONFIG: i32 = 2;
    pub const EXIT_NUMERIC: i32 = 3;
    pub const EXIT_ACCEPTANCE: i32 = 4;

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io(_) | CliError::Other(_) => Self::EXIT_IO,
            CliError::Config(_) => Self::EXIT_CONFIG,
            CliError::Numeric(_) => Self::EXIT_NUMERIC,
            CliError::Acceptance(_) => Self::EXIT_ACCEPTANCE,
        }
    }
}

impl From<ssmlora::Error> for CliError {
    fn from(e: ssmlora::Error) -> Self {
        use ssmlora::Error as E;
        match e {
            E::Config(_) | E::Plan(_) => CliError::Config(e.to_string()),
            E::Numeric(_) | E::Training { .. } => CliError::Numeric(e.to_string()),
            _ => CliError::Other(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
