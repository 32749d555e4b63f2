//! Crate-wide error type.
//!
//! Variants map onto the CLI exit-code contract: validation/configuration
//! problems exit 1, missing stage prerequisites exit 2, numeric failures
//! exit 3, and partial pipeline failures under `--strict` exit 4.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("format error: {0}")]
    Format(String),
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("argument error: {0}")]
    Argument(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("infeasible alignment: {0}")]
    InfeasibleAlignment(String),
    #[error("alignment required: {0}")]
    AlignmentRequired(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("dependency error: {0}")]
    Dependency(String),
    #[error("infeasible split: {0}")]
    InfeasibleSplit(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("{failed} of {total} items failed")]
    Partial { failed: usize, total: usize },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error under the CLI contract.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) => 3,
            Error::Dependency(_) => 2,
            Error::Partial { .. } => 4,
            _ => 1,
        }
    }
}
