use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] autodiff::Error),
    #[error(transparent)]
    Data(#[from] shapeworld::Error),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid batch: {0}")]
    Batch(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("training diverged at epoch {epoch}, step {step}: loss {loss} ({diagnostics})")]
    Divergence { epoch: usize, step: usize, loss: f64, diagnostics: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}
