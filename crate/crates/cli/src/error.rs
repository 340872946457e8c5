use std::process::ExitCode;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Core(#[from] forestnet::Error),
}

impl CliError {
    /// 2 for configuration problems, 3 for bad or missing data, 4 for
    /// numerical breakdown.
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Core(e) if e.is_numerical() => 4,
            CliError::Core(forestnet::Error::Config(_)) => 2,
            CliError::Core(_) => 3,
        })
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
