use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("degenerate covariance: Cholesky factorisation failed after jitter {jitter:e}")]
    DegenerateCovariance { jitter: f64 },

    #[error("integrator blow-up at step {step} (|x| = {norm:e})")]
    BlowUp { step: usize, norm: f64 },

    #[error("projection did not converge after {iterations} iterations (residual {residual:e})")]
    ProjectionNotConverged { iterations: usize, residual: f64 },

    #[error("boundary root-finding failed on ray {ray} (direction {direction:?})")]
    BoundaryRootFailure { ray: usize, direction: Vec<f64> },

    #[error("point is off the boundary: |phi(x)| = {measured:e}")]
    OffBoundary { measured: f64 },

    #[error("initial state is outside K (distance {distance:e})")]
    OutsideConstraint { distance: f64 },

    #[error("quasi-tangency violated at node {node} (t = {time}): residual {residual:e} exceeds {threshold:e} at step {delta:e}")]
    QuasiTangencyViolated {
        node: usize,
        time: f64,
        residual: f64,
        threshold: f64,
        delta: f64,
    },

    #[error("{module}: {message}")]
    Numerical { module: &'static str, message: String },

    #[error("replay mismatch in {file} at row {row}, column {column}: expected {expected:?}, found {found:?}")]
    ReplayMismatch {
        file: String,
        row: usize,
        column: usize,
        expected: String,
        found: String,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code of the CLI for this error.
    ///
    /// `1` a failed verdict, `2` configuration/input problems, `3` numerical
    /// failures, `4` replay mismatches.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::QuasiTangencyViolated { .. } => 1,
            Error::InvalidInput(_) | Error::Config(_) | Error::Io { .. } => 2,
            Error::OutsideConstraint { .. } | Error::OffBoundary { .. } => 2,
            Error::ReplayMismatch { .. } => 4,
            Error::DegenerateCovariance { .. }
            | Error::BlowUp { .. }
            | Error::ProjectionNotConverged { .. }
            | Error::BoundaryRootFailure { .. }
            | Error::Numerical { .. } => 3,
        }
    }
}
