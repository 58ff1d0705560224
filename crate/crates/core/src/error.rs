use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An input that must be finite (or otherwise in-domain) was not.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// Malformed artifact file; `field` names the offending entry.
    #[error("parse error in {path}: field `{field}`: {message}")]
    Parse {
        path: PathBuf,
        field: String,
        message: String,
    },

    #[error("schema version mismatch in {path}: found {found}, expected {expected}")]
    Version {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A linear system that must be nonsingular was not.
    #[error("singular system: {0}")]
    Singular(String),

    /// A metric that must be positive definite was not, or a CCM controller
    /// constraint set came up empty.
    #[error("certificate violation: {message} (eigenvalue {eigenvalue:e})")]
    Certificate { message: String, eigenvalue: f64 },

    #[error("solver failure: {0}")]
    Solver(String),

    /// Numerical integration left its admissible envelope.
    #[error("numerical integration error at t = {time}: {message}")]
    Integration { time: f64, message: String },

    #[error("missing model file: expected {0}")]
    MissingModel(PathBuf),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, field: impl Into<String>, message: impl ToString) -> Self {
        Error::Parse {
            path: path.into(),
            field: field.into(),
            message: message.to_string(),
        }
    }
}
