use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {reason}")]
    Path { path: PathBuf, reason: &'static str },
    #[error("{path} already exists; pass --force to overwrite")]
    Exists { path: PathBuf },
    #[error("stage {stage} needs a {parent} checkpoint; pass --from-checkpoint or --allow-stage-skip")]
    MissingCheckpoint { stage: &'static str, parent: &'static str },
    #[error("stage {stage} initializes from {expected}, but the checkpoint holds {found}")]
    StageOrder { stage: &'static str, expected: &'static str, found: &'static str },
    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("checkpoint belongs to world {found:#018x}, data to {expected:#018x}")]
    WorldMismatch { expected: u64, found: u64 },
    #[error(transparent)]
    Core(#[from] ovdet_core::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config: {0}")]
    Config(#[from] toml::de::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, CliError>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
    let path = path.into();
    move |source| CliError::Io { path, source }
}

pub fn format_err(path: impl Into<PathBuf>, reason: impl ToString) -> CliError {
    CliError::Format { path: path.into(), reason: reason.to_string() }
}
