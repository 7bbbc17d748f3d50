use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("index {index} out of range for {len} classes")]
    Index { index: usize, len: usize },
    #[error("degenerate batch: train-mode batch norm needs at least 2 rows, got {0}")]
    DegenerateBatch(usize),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),
    #[error("checkpoint format: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}
