use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    Dimension {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("{op}: batch size {got} is too small (need at least {need})")]
    BatchSize {
        op: &'static str,
        need: usize,
        got: usize,
    },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("{}: format error at byte {offset}: {msg}", path.display())]
    Format {
        path: PathBuf,
        offset: u64,
        msg: String,
    },

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("aggregation error: {0}")]
    Aggregation(String),

    #[error("non-finite loss at step {step}: loss={loss}, reg={reg}")]
    NonFinite { step: usize, loss: f64, reg: f64 },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Self {
        Error::Dimension { op, left, right }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
