use std::path::PathBuf;

use thiserror::Error;

/// Eigenvalue summary attached to conditioning failures and to successful inversions.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EigenReport {
    /// Smallest eigenvalue of the raw matrix.
    pub min: f64,
    /// Largest eigenvalue of the raw matrix.
    pub max: f64,
    /// Smallest eigenvalue after unit-diagonal equilibration.
    pub scaled_min: f64,
    /// Largest eigenvalue after unit-diagonal equilibration.
    pub scaled_max: f64,
}

impl std::fmt::Display for EigenReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "eigenvalues [{:.6e}, {:.6e}], equilibrated [{:.6e}, {:.6e}]",
            self.min, self.max, self.scaled_min, self.scaled_max
        )
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: String, found: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("bad magic {0:?} (expected \"IMGX1\")")]
    BadMagic(String),

    #[error("payload size mismatch: header implies {expected} bytes, found {found}")]
    SizeMismatch { expected: usize, found: usize },

    #[error("unsupported dtype {0:?}")]
    UnsupportedDtype(String),

    #[error("singular model: pixel {pixel} has expected count {lambda:e} but nonzero sensitivity")]
    SingularModel { pixel: usize, lambda: f64 },

    #[error("ill-conditioned Fisher matrix: {0}")]
    IllConditioned(EigenReport),

    #[error("covariance is not positive semidefinite (jitter {jitter:e} insufficient)")]
    NotPositiveSemidefinite { jitter: f64 },

    #[error("spectral initialisation failed: {0}")]
    InitFailed(String),

    #[error("no start converged; best negative log-likelihood {best_nll}")]
    NonConvergence { best: Box<crate::estimators::FitResult>, best_nll: f64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn dims(expected: impl std::fmt::Display, found: impl std::fmt::Display) -> Self {
        Error::DimensionMismatch { expected: expected.to_string(), found: found.to_string() }
    }

    /// True for failures that come from the numerics rather than from inputs or files.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::SingularModel { .. }
                | Error::IllConditioned(_)
                | Error::NotPositiveSemidefinite { .. }
                | Error::InitFailed(_)
                | Error::NonConvergence { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
