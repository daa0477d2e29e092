//! Error type shared by every module of the toolkit.
//!
//! Each variant names the modelling assumption or module contract it guards so
//! that a failing run can be traced back to the hypothesis that was violated.

use thiserror::Error;

/// Broad failure classes, used by front ends to choose exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    /// Invalid configuration, geometry, parameters or coefficients.
    Validation,
    /// A nonlinear iteration failed; the data are too large for the
    /// small-data regime.
    Smallness,
    /// The weighted least-squares problem could not be solved reliably.
    Conditioning,
    /// A broken internal invariant.
    Internal,
}

/// All errors raised by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value is out of range.
    #[error("configuration error: {0}")]
    Config(String),

    /// The control and observation regions violate assumption A3
    /// (closure of the control region inside the domain, nonempty overlap).
    #[error("geometric assumption A3 violated: {0}")]
    Geometry(String),

    /// A region or weight window is too thin for the grid.
    #[error("resolution error: {0}")]
    Resolution(String),

    /// Carleman parameter constraint violated.
    #[error("parameter error: {message} (threshold {threshold})")]
    Parameter {
        /// Human readable description.
        message: String,
        /// The threshold that was not met.
        threshold: f64,
    },

    /// The spatial weight profile failed its numerical checks.
    #[error("eta construction error: {message} (measured floor {floor})")]
    Eta {
        /// Human readable description.
        message: String,
        /// Measured gradient floor outside the innermost region.
        floor: f64,
    },

    /// A coefficient function violates assumption A7 or A8, or its
    /// derivative table is inconsistent.
    #[error("coefficient assumption {assumption} violated: {message}")]
    Coefficient {
        /// Assumption label (A7, A8 or derivative-table).
        assumption: &'static str,
        /// Human readable description.
        message: String,
    },

    /// A Newton solve or the outer fixed-point loop failed to converge.
    #[error("smallness violation: {0}")]
    Smallness(String),

    /// Conjugate gradient stagnated.
    #[error("conditioning error: {message} (iterations {iterations}, residual {residual:e})")]
    Conditioning {
        /// Human readable description.
        message: String,
        /// Iterations performed.
        iterations: usize,
        /// Relative residual reached.
        residual: f64,
    },

    /// Source data overlap time cells whose weights underflowed.
    #[error("weight resolution error: {0}")]
    WeightResolution(String),

    /// A function was called with arguments that break its contract.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Fields live on different grids.
    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    /// Internal invariant broken.
    #[error("internal error: {0}")]
    Internal(String),
}

impl Error {
    /// Failure class of this error.
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_)
            | Error::Geometry(_)
            | Error::Resolution(_)
            | Error::Parameter { .. }
            | Error::Eta { .. }
            | Error::Coefficient { .. }
            | Error::Contract(_)
            | Error::GridMismatch(_) => ErrorCategory::Validation,
            Error::Smallness(_) => ErrorCategory::Smallness,
            Error::Conditioning { .. } | Error::WeightResolution(_) => ErrorCategory::Conditioning,
            Error::Internal(_) => ErrorCategory::Internal,
        }
    }
}

/// Convenience alias.
pub type Result<T> = std::result::Result<T, Error>;
