use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at {context}: expected {expected:?}, got {got:?}")]
    Shape {
        context: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("structural error: {0}")]
    Structure(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("unsupported topology: {0}")]
    Unsupported(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
