use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Configuration or argument validation failure.
    #[error("config error: {0}")]
    Config(String),
    /// A token sequence does not fit the model's context window.
    #[error("sequence of length {len} exceeds context window {max}")]
    Length { len: usize, max: usize },
    /// A dataset file parsed to zero usable pairs.
    #[error("dataset at {0} is empty")]
    EmptyDataset(PathBuf),
    /// A malformed line in a JSONL input.
    #[error("parse error in {path} at line {line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    /// Every latent distance in a cohort is zero; weights s/S are undefined.
    #[error("degenerate cohort: all {0} latent distances are zero")]
    DegenerateCohort(usize),
    /// Training produced a non-finite loss.
    #[error("non-finite loss {loss} at step {step}")]
    NonFiniteLoss { step: usize, loss: f64 },
    /// A verification check did not meet its tolerance.
    #[error("verification failed [{check}]: {detail}")]
    Verification { check: String, detail: String },
    /// Checkpoint serialization/deserialization failure.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("iteration {iteration} failed: {source}")]
    Iteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn at_iteration(self, iteration: usize) -> Self {
        Error::Iteration {
            iteration,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
