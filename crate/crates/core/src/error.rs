use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: parse error: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("input error: {0}")]
    Input(String),

    #[error("did not converge after {iterations} iterations (last sup-norm change {residual:e})")]
    Convergence { iterations: usize, residual: f64 },

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("divergent KL: {0}")]
    DivergentKl(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("incompatible: {0}")]
    Compatibility(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Numeric failures (divergence, non-convergence) map to a distinct process exit code.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Numeric(_) | Error::Convergence { .. })
    }
}
