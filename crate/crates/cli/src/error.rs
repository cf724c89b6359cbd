use std::fmt;

use glvd::Error;

/// Exit code for invalid input: bad config, missing or corrupt artifacts.
pub const EXIT_VALIDATION: i32 = 1;
/// Exit code for failures while a stage runs.
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn validation(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_VALIDATION,
            message: message.into(),
        }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_RUNTIME,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_)
            | Error::Invalid(_)
            | Error::MissingArtifact { .. }
            | Error::Corrupt { .. }
            | Error::Fingerprint { .. }
            | Error::Camera(_)
            | Error::Mesh(_) => EXIT_VALIDATION,
            _ => EXIT_RUNTIME,
        };
        let message = match &e {
            Error::MissingArtifact { path, hint } => {
                format!("missing artifact {}: produce it with `glvd {hint}`", path.display())
            }
            _ => e.to_string(),
        };
        CliError { code, message }
    }
}

pub type CliResult<T> = Result<T, CliError>;
