use thiserror::Error;

#[derive(Debug, Error)]
pub enum LgaError {
    #[error("shape mismatch in {op}: expected {expected}, got {actual}")]
    Shape {
        op: &'static str,
        expected: String,
        actual: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("empty pair batch")]
    EmptyPairs,

    #[error(
        "forward intermediates were not retained; rerun the forward pass with caching enabled"
    )]
    MissingIntermediates,

    #[error("{what} too large for dense path: {n} nodes (limit {limit})")]
    TooLarge {
        what: &'static str,
        n: usize,
        limit: usize,
    },

    #[error("malformed data: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, LgaError>;

pub(crate) fn shape_err(
    op: &'static str,
    expected: impl ToString,
    actual: impl ToString,
) -> LgaError {
    LgaError::Shape {
        op,
        expected: expected.to_string(),
        actual: actual.to_string(),
    }
}
