use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by model construction, estimation and I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("point ({x}, {y}) lies outside the observation window")]
    PointOutsideWindow { x: f64, y: f64 },

    #[error("duplicate point at ({x}, {y})")]
    DuplicatePoint { x: f64, y: f64 },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("pattern violates the hard core of the model")]
    Infeasible,

    /// The estimate is unbounded, e.g. a Strauss pattern without any R-close pair.
    #[error("estimate does not exist: {0}")]
    EstimateDoesNotExist(String),

    #[error("no convergence after {iterations} iterations (last |e|_inf = {last_norm:e})")]
    NoConvergence {
        iterations: usize,
        last_theta: Vec<f64>,
        last_norm: f64,
    },

    /// `I + T` was not positive definite for some configuration.
    #[error("kernel system is not positive definite (pivot {pivot})")]
    NotPositiveDefinite { pivot: usize },

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("degenerate estimating-function covariance: {0}")]
    Degenerate(String),

    #[error("replicate {index} ({label}): {source}")]
    Replicate {
        index: usize,
        label: String,
        #[source]
        source: Box<Error>,
    },

    #[error("too many failed fits: {failed} of {total}")]
    TooManyFailures { failed: usize, total: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
}

impl Error {
    /// True for failures caused by numerics rather than by bad input.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::EstimateDoesNotExist(_)
            | Error::NoConvergence { .. }
            | Error::NotPositiveDefinite { .. }
            | Error::Singular(_)
            | Error::Degenerate(_)
            | Error::TooManyFailures { .. } => true,
            Error::Replicate { source, .. } => source.is_numerical(),
            _ => false,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
