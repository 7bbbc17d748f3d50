use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] refgame_core::Error),
    #[error(transparent)]
    Data(#[from] shapeworld::Error),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{failed} of {total} seed runs failed; partial summary written")]
    PartialSeeds { failed: usize, total: usize },
}

impl CliError {
    /// 2 for bad configuration or input, 3 for numerical divergence, 4 for
    /// a partially failed multi-seed run, 1 for internal errors.
    pub fn exit_code(&self) -> i32 {
        use refgame_core::Error as E;
        match self {
            CliError::Core(E::Divergence { .. }) => 3,
            CliError::Core(E::Tensor(_)) => 1,
            CliError::PartialSeeds { .. } => 4,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(CliError::Config(msg.into()))
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
    let path = path.into();
    move |source| CliError::Io { path, source }
}
