use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unknown taxonomy leaf {0}")]
    UnknownLeaf(usize),
    #[error("internal split error: {0}")]
    Internal(String),
    #[error(transparent)]
    Tensor(#[from] autodiff::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
