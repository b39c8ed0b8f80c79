use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Array(#[from] autodiff::Error),
    #[error("structural error: {0}")]
    Structural(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("sentence {index} has zero probability under the grammar")]
    ZeroProbability { index: usize },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
