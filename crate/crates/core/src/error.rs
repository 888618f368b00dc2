//! Error type shared by every stage of the pipeline.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed, inconsistent or non-finite input data.
    #[error("data error: {0}")]
    Data(String),

    /// Requested truncation number is outside `1..=L`.
    #[error("invalid truncation: K = {k} but only {available} Fourier frequencies are available")]
    InvalidTruncation { k: usize, available: usize },

    /// Configuration values that contradict each other or the data.
    #[error("configuration error: {0}")]
    Config(String),

    /// Fisher scoring ran out of iterations.
    #[error(
        "Fisher scoring did not converge after {iterations} iterations \
         (gradient sup-norm {gradient_norm:.3e})"
    )]
    NonConvergence {
        iterations: usize,
        gradient_norm: f64,
        last_iterate: Vec<f64>,
    },

    /// The objective overflowed, usually a sign of a bad step.
    #[error("objective diverged: {0}")]
    Divergence(String),

    /// Covariates are linearly dependent after centering.
    #[error("collinear covariates: columns {columns:?} are linear combinations of earlier columns")]
    Collinearity { columns: Vec<usize> },

    /// Factorization or eigen-solver trouble.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// Stiefel-manifold search for the envelope basis did not settle.
    #[error("envelope optimizer did not converge; objective trace tail {trace:?}")]
    ManifoldNonConvergence { trace: Vec<f64> },

    /// Too many bootstrap or benchmark repetitions failed.
    #[error("{failed} of {attempted} {what} failed")]
    FailureRate {
        what: &'static str,
        failed: usize,
        attempted: usize,
    },

    /// Error attached to a specific replicate of the panel.
    #[error("replicate {index}: {source}")]
    Replicate {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn at_replicate(self, index: usize) -> Self {
        Error::Replicate {
            index,
            source: Box::new(self),
        }
    }

    /// Process exit code used by the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Data(_) | Error::Collinearity { .. } | Error::Io { .. } => 2,
            Error::NonConvergence { .. }
            | Error::Divergence(_)
            | Error::Numerical(_)
            | Error::ManifoldNonConvergence { .. }
            | Error::FailureRate { .. } => 3,
            Error::InvalidTruncation { .. } | Error::Config(_) => 4,
            Error::Replicate { source, .. } => source.exit_code(),
        }
    }
}
