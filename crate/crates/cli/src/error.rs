use std::process::ExitCode;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("gradient check failed at tolerance {0:e}")]
    GradCheckFailed(f64),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] hymoe::Error),
}

impl CliError {
    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// 2 config, 3 data, 4 numeric failure, 5 checkpoint, 1 anything else.
    pub fn exit_code(&self) -> ExitCode {
        let code = match self {
            CliError::Config(_) | CliError::Core(hymoe::Error::Config(_)) => 2,
            CliError::Core(hymoe::Error::Data(_)) => 3,
            CliError::GradCheckFailed(_) | CliError::Core(hymoe::Error::NonFinite { .. }) => 4,
            CliError::Core(hymoe::Error::Checkpoint(_)) => 5,
            CliError::Io { .. } | CliError::Core(_) => 1,
        };
        ExitCode::from(code)
    }
}
