use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Manifest {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("plot: {0}")]
    Plot(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("non-finite loss at step {step}: L_f={l_f} L_d1={l_d1} L_d2={l_d2} L_div={l_div}")]
    NonFiniteLoss {
        step: usize,
        l_f: f64,
        l_d1: f64,
        l_d2: f64,
        l_div: f64,
    },

    #[error("{context}: {source}")]
    Run {
        context: String,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag for the error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Dimension { .. } => "dimension",
            Error::Io { .. } => "io",
            Error::Manifest { .. } => "manifest",
            Error::Checkpoint(_) => "checkpoint",
            Error::Plot(_) => "plot",
            Error::Input(_) => "input",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::Run { source, .. } => source.kind(),
        }
    }
}
