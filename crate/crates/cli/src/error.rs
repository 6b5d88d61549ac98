//! CLI error type and the exit-code contract.
//!
//! Every failure is classified at its call site: problems with the
//! user's arguments, config file, or input data exit with code 2,
//! failures during execution exit with code 1. Success is 0.

use std::fmt::Display;

use thiserror::Error;

/// A classified command failure.
#[derive(Debug, Error)]
pub enum CliError {
    /// The user's arguments, config, or input data are wrong (exit 2).
    #[error("{0}")]
    Usage(String),
    /// Execution failed after inputs validated (exit 1).
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    /// Process exit code for this failure class.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Internal(_) => 1,
        }
    }
}

/// Wrap an error from validating user input.
pub fn usage(err: impl Display) -> CliError {
    CliError::Usage(err.to_string())
}

/// Wrap an error from executing a validated pipeline stage.
pub fn internal(err: impl Display) -> CliError {
    CliError::Internal(err.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_the_contract() {
        assert_eq!(usage("bad flag").exit_code(), 2);
        assert_eq!(internal("disk full").exit_code(), 1);
        assert_eq!(usage("x").to_string(), "x");
    }
}
