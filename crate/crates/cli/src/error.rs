use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// A check ran and did not pass.
    #[error("check failed: {0}")]
    Check(String),
    #[error("{0}")]
    Config(String),
    #[error("preflight: {0}")]
    Resource(String),
    #[error(transparent)]
    Core(#[from] ann_core::Error),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Check(_) => 1,
            CliError::Config(_) => 2,
            CliError::Resource(_) => 3,
            CliError::Core(ann_core::Error::Parameter(_)) => 2,
            CliError::Core(ann_core::Error::Resource(_)) => 3,
            CliError::Core(_) | CliError::Io(_) => 1,
        }
    }
}
