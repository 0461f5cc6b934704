use thiserror::Error;

/// Failures mapped onto the process exit status.
#[derive(Debug, Error)]
pub enum CliError {
    /// Invalid configuration or input contents (exit 2).
    #[error("config error: {0}")]
    Config(String),
    /// File system failure (exit 3).
    #[error("i/o error: {0}")]
    Io(String),
    /// Numerical failure during computation (exit 4).
    #[error("numerical error: {0}")]
    Numerical(String),
    /// At least one audit failed (exit 5).
    #[error("verification failed: {0}")]
    VerifyFailed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Numerical(_) => 4,
            CliError::VerifyFailed(_) => 5,
        }
    }
}

impl From<netgp::Error> for CliError {
    fn from(e: netgp::Error) -> Self {
        use netgp::Error as E;
        match e {
            E::InvalidConfig(_)
            | E::DimensionMismatch(_)
            | E::ShapeMismatch { .. }
            | E::DegenerateTruth
            | E::UnstableInstance { .. }
            | E::ProblemTooLarge { .. } => CliError::Config(e.to_string()),
            E::Training { .. } | E::NotPositiveDefinite { .. } | E::SingularSystem { .. } | E::EigenFailure(_) => {
                CliError::Numerical(e.to_string())
            }
        }
    }
}
