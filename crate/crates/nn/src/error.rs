use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("unknown backbone `{0}`")]
    UnknownBackbone(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NnError>;
