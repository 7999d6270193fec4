use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Malformed or invalid configuration: exit code 2.
    #[error("config error: {0}")]
    Config(String),
    /// The computation itself failed: exit code 1.
    #[error("{0}")]
    Domain(vd_core::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Domain(_) | CliError::Io(_) => 1,
        }
    }
}

impl From<vd_core::Error> for CliError {
    fn from(e: vd_core::Error) -> Self {
        use vd_core::Error::*;
        match e {
            InvalidModel(_) | InvalidKernel(_) | InvalidGrid(_) | InvalidExperiment(_) => CliError::Config(e.to_string()),
            other => CliError::Domain(other),
        }
    }
}
