use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] kdfusion::Error),

    #[error("{0}")]
    CheckFailed(String),
}

impl CliError {
    /// 0 success, 1 usage/config, 2 missing upstream artifact, 3 failed check.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(
                kdfusion::Error::Dependency { .. } | kdfusion::Error::MissingComponent(_),
            ) => 2,
            CliError::Core(_) => 1,
            CliError::CheckFailed(_) => 3,
        }
    }
}
