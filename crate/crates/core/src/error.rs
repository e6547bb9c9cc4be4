use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("index out of range in {op}: {index} >= {bound}")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("comparison error: {0}")]
    Comparison(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("mismatch: {0}")]
    Mismatch(String),

    #[error("refusing to proceed: {0}")]
    Refused(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Stable machine-readable code printed by the command-line front end.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "E_DIMENSION",
            Error::Index { .. } => "E_INDEX",
            Error::Contract(_) => "E_CONTRACT",
            Error::Format(_) => "E_FORMAT",
            Error::Integrity(_) => "E_INTEGRITY",
            Error::Training(_) => "E_TRAINING",
            Error::Evaluation(_) => "E_EVALUATION",
            Error::Comparison(_) => "E_COMPARISON",
            Error::Config(_) => "E_CONFIG",
            Error::Mismatch(_) => "E_MISMATCH",
            Error::Refused(_) => "E_REFUSED",
            Error::Io { .. } => "E_IO",
        }
    }

    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
