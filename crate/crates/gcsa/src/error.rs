//! Errors with process exit codes.

use std::path::Path;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags or configuration. Exit code 2.
    #[error("usage error: {0}")]
    Usage(String),
    /// Missing, unreadable or inconsistent input. Exit code 3.
    #[error("data error: {0}")]
    Data(String),
    /// Non-finite values or failed numeric checks. Exit code 4.
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Data(format!("{}: {e}", path.display()))
    }

    pub fn json(path: &Path, e: serde_json::Error) -> Self {
        CliError::Data(format!("{}: {e}", path.display()))
    }
}

impl From<gcsa_core::Error> for CliError {
    fn from(e: gcsa_core::Error) -> Self {
        use gcsa_core::Error as E;
        match e {
            E::Config(_) | E::Parameter(_) => CliError::Usage(e.to_string()),
            E::NonFinite(_) => CliError::Numeric(e.to_string()),
            E::Shape { .. } | E::DegenerateNorm | E::Data(_) | E::NoPositives => {
                CliError::Data(e.to_string())
            }
        }
    }
}
