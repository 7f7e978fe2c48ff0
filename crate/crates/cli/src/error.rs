use thiserror::Error;

/// Failure classes, each with its own exit status.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Clap(clap::Error),
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Runtime(#[from] pgg_act_core::Error),
    #[error("{0}")]
    PartialFailure(String),
    #[error("verification failed: {0}")]
    Verification(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Clap(e) if !e.use_stderr() => 0,
            CliError::Clap(_) | CliError::Usage(_) => 1,
            CliError::Runtime(_) | CliError::PartialFailure(_) => 2,
            CliError::Verification(_) => 3,
        }
    }
}
