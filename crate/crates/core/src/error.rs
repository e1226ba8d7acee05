use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("extent mismatch: {0}")]
    ExtentMismatch(String),
    #[error("grid too small: {0}")]
    TooSmall(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("degenerate mask: {0}")]
    DegenerateMask(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error("stage `{stage}` diverged at step {step}: {reason}")]
    Divergence {
        stage: String,
        step: usize,
        reason: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn ensure(cond: bool, err: impl FnOnce() -> Error) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(err())
    }
}
