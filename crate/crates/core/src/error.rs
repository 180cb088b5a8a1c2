use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("degenerate triangle {index} (signed area {area:e})")]
    DegenerateTriangle { index: usize, area: f64 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("factorization failed: {context} ({diagnostic})")]
    Factorization { context: String, diagnostic: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("rejection sampling exhausted after {0} attempts")]
    SamplingExhausted(usize),

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {}: {message}", path.display())]
    Format { path: PathBuf, message: String },
}

impl Error {
    /// True for failures of the numerical machinery (as opposed to bad input).
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Factorization { .. } | Error::Numerical(_))
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn factorization(context: impl Into<String>, diagnostic: impl Into<String>) -> Self {
        Error::Factorization {
            context: context.into(),
            diagnostic: diagnostic.into(),
        }
    }
}
