use thiserror::Error;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("vector norm is below the normalization threshold")]
    ZeroNorm,
    #[error("row {row} has zero norm")]
    RowZeroNorm { row: usize },
    #[error("row {row} is not unit norm")]
    NotUnitNorm { row: usize },
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("candidate list is empty")]
    EmptyCandidates,
    #[error("stage {stage} cannot consume {what}")]
    StageMismatch { stage: &'static str, what: &'static str },
    #[error("loss evaluated to a non-finite value")]
    NonFiniteLoss,
    #[error("could not satisfy prototype separation cap after {attempts} attempts")]
    SeparationUnsatisfiable { attempts: usize },
    #[error("unknown class id {0}")]
    UnknownClass(usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(&'static str),
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}
