use thiserror::Error;

use sdeguard_core::Error as CoreError;

/// Failures mapped to the documented exit codes.
#[derive(Debug, Error)]
pub enum CliError {
    /// Exit 2.
    #[error("config error: {0}")]
    Config(String),
    /// Exit 3.
    #[error("{0}")]
    NonFiniteLoss(String),
    /// Exit 4.
    #[error("{0}")]
    ModelMismatch(String),
    /// Exit 5.
    #[error("{diverged} of {total} rollouts diverged")]
    Divergence { diverged: usize, total: usize },
    /// Exit 1.
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Other(_) => 1,
            CliError::Config(_) => 2,
            CliError::NonFiniteLoss(_) => 3,
            CliError::ModelMismatch(_) => 4,
            CliError::Divergence { .. } => 5,
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Config { .. } | CoreError::UnknownSystem(_) | CoreError::TraceMode(_) => {
                CliError::Config(e.to_string())
            }
            CoreError::NonFiniteLoss { .. } => CliError::NonFiniteLoss(e.to_string()),
            CoreError::Loss { ref source, .. } if matches!(**source, CoreError::NonFiniteLoss { .. }) => {
                CliError::NonFiniteLoss(e.to_string())
            }
            CoreError::ModelMismatch(_) | CoreError::DimensionMismatch { .. } => CliError::ModelMismatch(e.to_string()),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codes() {
        assert_eq!(CliError::from(CoreError::config("seed", "missing")).exit_code(), 2);
        assert_eq!(CliError::from(CoreError::UnknownSystem("x".into())).exit_code(), 2);
        let nf = CoreError::NonFiniteLoss {
            iteration: 3,
            point: vec![1.0],
        };
        assert_eq!(CliError::from(nf).exit_code(), 3);
        assert_eq!(CliError::from(CoreError::ModelMismatch("w".into())).exit_code(), 4);
        assert_eq!(CliError::Divergence { diverged: 3, total: 4 }.exit_code(), 5);
    }
}
