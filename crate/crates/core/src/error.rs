use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid bit-width, cost table, method profile or run configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed or out-of-domain input data.
    #[error("input error: {0}")]
    Input(String),

    /// A shift or fixed-point result that does not fit the word.
    #[error("overflow: {0}")]
    Overflow(String),

    /// Operations invoked out of order, e.g. backward without a cached forward.
    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("training fault at step {step}, layer {layer}: {detail}")]
    TrainingFault {
        step: u64,
        layer: usize,
        detail: String,
    },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(what: &str, expected: &[usize], got: &[usize]) -> Self {
        Error::Input(format!("{what}: expected shape {expected:?}, got {got:?}"))
    }
}
