//! Command-level errors mapped to exit codes: validation problems exit 1,
//! runtime failures exit 2.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("runtime failure: {0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<metasel::Error> for CliError {
    fn from(e: metasel::Error) -> Self {
        match e {
            metasel::Error::Config(msg) => CliError::Validation(msg),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(format!("io: {e}"))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(format!("json: {e}"))
    }
}

pub type CliResult<T> = Result<T, CliError>;
