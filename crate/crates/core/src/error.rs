use std::path::PathBuf;

use tft_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {err}")]
    Io {
        path: PathBuf,
        #[source]
        err: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error(
        "pair too long: {source_subwords} source + {target_subwords} target subwords + specials exceed max_len {max_len}"
    )]
    TooLong {
        source_subwords: usize,
        target_subwords: usize,
        max_len: usize,
    },
    #[error("word span ({start}, {end}) out of range for sentence of {words} words")]
    WordSpan {
        start: usize,
        end: usize,
        words: usize,
    },
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("training diverged at step {step}: loss {loss}")]
    Divergence { step: usize, loss: f64 },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, err: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            err,
        }
    }
}
