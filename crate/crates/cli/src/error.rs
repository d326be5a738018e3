use thiserror::Error;
use vdpcr_core::Error as CoreError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration: {0}")]
    Config(String),

    #[error("input: {0}")]
    Input(String),

    #[error(transparent)]
    Core(#[from] CoreError),
}

impl CliError {
    /// 2 configuration, 3 input data, 4 i/o, 5 checkpoint or dump, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Input(_) => 3,
            CliError::Core(e) => match e {
                CoreError::Config(_) => 2,
                CoreError::Parse { .. }
                | CoreError::Validation { .. }
                | CoreError::SequenceTooLong { .. }
                | CoreError::Json(_) => 3,
                CoreError::Io(_) => 4,
                CoreError::Checkpoint(_) | CoreError::Dump(_) => 5,
                _ => 1,
            },
        }
    }

    pub fn category(&self) -> &'static str {
        match self.exit_code() {
            2 => "config",
            3 => "input",
            4 => "io",
            5 => "checkpoint",
            _ => "internal",
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(CoreError::Io(e))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(CoreError::Json(e))
    }
}
