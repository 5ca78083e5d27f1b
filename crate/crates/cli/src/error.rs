use std::fmt;

use gsqg::GsqgError;

/// Failure of a command, mapped to the process exit status.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config or inputs.
    Usage(String),
    /// A solver stopped without meeting its tolerance.
    NonConvergence(String),
    /// `verify` found a residual above its tolerance.
    Verification(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::NonConvergence(_) => 2,
            CliError::Verification(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::NonConvergence(m) | CliError::Verification(m) => f.write_str(m),
        }
    }
}

impl From<GsqgError> for CliError {
    fn from(e: GsqgError) -> Self {
        match e {
            GsqgError::Parameter(_) | GsqgError::Parse { .. } | GsqgError::Io(_) | GsqgError::Incompatible(_) => {
                CliError::Usage(e.to_string())
            }
            _ => CliError::NonConvergence(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Usage(format!("io error: {e}"))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Usage(format!("json error: {e}"))
    }
}
