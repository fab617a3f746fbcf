use lga_core::LgaError;
use lga_toy::ToyError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags, unknown keys or unparsable values.
    #[error("configuration error: {0}")]
    Config(String),
    /// The command ran but a check it performs did not pass.
    #[error("check failed: {0}")]
    CheckFailed(String),
    #[error(transparent)]
    Core(#[from] LgaError),
    #[error(transparent)]
    Toy(#[from] ToyError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    /// 0 success, 1 check failure or runtime error, 2 usage or configuration.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(LgaError::Config(_)) | CliError::Toy(ToyError::Config(_)) => 2,
            CliError::Toy(ToyError::Core(LgaError::Config(_))) => 2,
            _ => 1,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
