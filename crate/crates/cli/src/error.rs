use std::path::Path;

use isosplat_core::Error as CoreError;

/// Failure of a CLI command; each variant maps to a documented exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Unreadable or malformed input file.
    #[error("{0}")]
    Input(String),
    /// Invalid configuration; the message names the offending field.
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{0}")]
    Diverged(String),
    #[error("wall-clock budget exceeded: {0}")]
    BudgetExceeded(String),
    /// Output could not be written.
    #[error("{0}")]
    Output(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::Config(_) => 3,
            CliError::Diverged(_) => 4,
            CliError::BudgetExceeded(_) => 5,
            CliError::Output(_) => 1,
        }
    }

    pub fn input(path: &Path, what: impl std::fmt::Display) -> Self {
        CliError::Input(format!("{}: {what}", path.display()))
    }

    pub fn output(path: &Path, what: impl std::fmt::Display) -> Self {
        CliError::Output(format!("cannot write {}: {what}", path.display()))
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Diverged { .. } => CliError::Diverged(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
