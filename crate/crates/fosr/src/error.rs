use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("input: {0}")]
    Input(String),
    #[error("format: {0}")]
    Format(String),
    #[error("output: {0}")]
    Output(String),
    #[error("{0} validation problem(s) in the data")]
    Invalid(usize),
    #[error(transparent)]
    Core(#[from] fosr_core::Error),
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Format(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Output(e.to_string())
    }
}

impl CliError {
    /// 1 usage, 2 data, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Input(_)
            | CliError::Format(_)
            | CliError::Output(_)
            | CliError::Invalid(_) => 2,
            CliError::Core(e) if e.is_config_error() => 1,
            CliError::Core(e) if e.is_data_error() => 2,
            CliError::Core(_) => 3,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
