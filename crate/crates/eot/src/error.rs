use std::path::PathBuf;

/// Errors of the file formats, experiment runner and CLI.
#[derive(Debug, thiserror::Error)]
pub enum EotError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] eot_core::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Stream(#[from] std::io::Error),
    #[error("pattern: {0}")]
    Pattern(#[from] glob::PatternError),
}

pub type Result<T> = std::result::Result<T, EotError>;

pub(crate) fn io_at(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> EotError {
    let path = path.into();
    move |source| EotError::Io { path, source }
}
