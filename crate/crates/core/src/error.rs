use std::path::PathBuf;

use thiserror::Error;

use crate::diff::DiffError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("marching cubes needs resolution >= 2, got {0}")]
    Resolution(usize),
    #[error("input resolution mismatch: expected {expected}, got {actual}")]
    InputResolution { expected: String, actual: String },
    #[error("{0} is empty")]
    Empty(&'static str),
    #[error("non-finite state at integration step {step}")]
    NonFiniteFlow { step: usize },
    #[error("non-finite loss at step {step}; last good checkpoint: {last_checkpoint:?}")]
    NonFiniteLoss {
        step: u64,
        last_checkpoint: Option<PathBuf>,
    },
    #[error("interpolation parameter {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("code dimension mismatch: {0} vs {1}")]
    CodeDimension(usize, usize),
    #[error("model is in stage {actual}, operation needs stage {expected}")]
    Stage { expected: u8, actual: u8 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("corrupt data: {0}")]
    Corrupt(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) trait IoContext<T> {
    fn context(self, what: impl FnOnce() -> String) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn context(self, what: impl FnOnce() -> String) -> Result<T> {
        self.map_err(|source| Error::Io {
            context: what(),
            source,
        })
    }
}
