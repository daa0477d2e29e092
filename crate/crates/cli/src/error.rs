//! Front-end errors and exit codes.

use insens_core::{Error, ErrorCategory};
use thiserror::Error;

/// Errors of the command-line front end.
#[derive(Debug, Error)]
pub enum CliError {
    /// An error raised by the toolkit.
    #[error("{0}")]
    Core(#[from] Error),
    /// The configuration file could not be parsed.
    #[error("cannot parse {origin}: {message}")]
    Parse {
        /// File name or other origin.
        origin: String,
        /// Parser message with line, column and field.
        message: String,
    },
    /// A configuration value is rejected before the problem is assembled.
    #[error("{0}")]
    Invalid(String),
    /// Reading or writing a file failed.
    #[error("i/o error on {path}: {source}")]
    Io {
        /// The file involved.
        path: String,
        /// Underlying error.
        source: std::io::Error,
    },
    /// Serialization of an output failed.
    #[error("cannot write output: {0}")]
    Output(String),
}

impl CliError {
    /// Failure class, which selects the exit code.
    pub fn category(&self) -> ErrorCategory {
        match self {
            CliError::Core(e) => e.category(),
            CliError::Parse { .. } | CliError::Invalid(_) => ErrorCategory::Validation,
            CliError::Io { .. } | CliError::Output(_) => ErrorCategory::Internal,
        }
    }

    /// Process exit code: 2 validation, 3 smallness, 4 conditioning,
    /// 5 internal.
    pub fn exit_code(&self) -> u8 {
        exit_code(self.category())
    }

    /// Short name of the violated assumption or contract.
    pub fn contract(&self) -> &'static str {
        match self {
            CliError::Core(e) => core_contract(e),
            CliError::Parse { .. } | CliError::Invalid(_) => "configuration",
            CliError::Io { .. } => "file system",
            CliError::Output(_) => "output",
        }
    }
}

/// Exit code of a failure class.
pub fn exit_code(category: ErrorCategory) -> u8 {
    match category {
        ErrorCategory::Validation => 2,
        ErrorCategory::Smallness => 3,
        ErrorCategory::Conditioning => 4,
        ErrorCategory::Internal => 5,
    }
}

/// Short name of the assumption or module contract guarded by a core error.
pub fn core_contract(e: &Error) -> &'static str {
    match e {
        Error::Config(_) => "configuration",
        Error::Geometry(_) => "A3 (regions)",
        Error::Resolution(_) => "grid resolution",
        Error::Parameter { .. } => "weight parameters",
        Error::Eta { .. } => "weight profile",
        Error::Coefficient { assumption, .. } => assumption,
        Error::Smallness(_) => "small-data regime",
        Error::Conditioning { .. } => "least-squares solver",
        Error::WeightResolution(_) => "weight resolution",
        Error::Contract(_) => "module contract",
        Error::GridMismatch(_) => "grid compatibility",
        Error::Internal(_) => "internal invariant",
    }
}

/// Lower-case label of a failure class.
pub fn category_label(category: ErrorCategory) -> &'static str {
    match category {
        ErrorCategory::Validation => "validation",
        ErrorCategory::Smallness => "smallness",
        ErrorCategory::Conditioning => "conditioning",
        ErrorCategory::Internal => "internal",
    }
}
