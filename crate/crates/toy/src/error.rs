use std::path::PathBuf;

use lga_core::LgaError;

#[derive(Debug, thiserror::Error)]
pub enum ToyError {
    #[error(transparent)]
    Core(#[from] LgaError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}, step {step} ({what}); diagnostics written to {}", dump.display())]
    Diverged {
        epoch: usize,
        step: usize,
        what: String,
        dump: PathBuf,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type ToyResult<T> = std::result::Result<T, ToyError>;
