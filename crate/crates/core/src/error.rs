use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot decode WAV {path}: {reason}")]
    Wav { path: PathBuf, reason: String },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("audio is silent after trimming")]
    EmptyAfterTrim,

    #[error("waveform has {samples} samples, need at least {needed}")]
    TooShort { samples: usize, needed: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    Numeric(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged at iteration {iteration}: {loss} = {value}")]
    Diverged {
        iteration: usize,
        loss: &'static str,
        value: f64,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
