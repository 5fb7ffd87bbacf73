use std::path::PathBuf;

use crate::drivetrain::SystemState;
use crate::params::Violation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at `{key}`: {message}")]
    Parse { key: String, message: String },

    #[error("missing required key `{0}`")]
    MissingKey(String),

    #[error("unknown key `{0}`")]
    UnknownKey(String),

    #[error("invalid configuration:\n{}", format_violations(.0))]
    Validation(Vec<Violation>),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("infeasible: {message} (best achievable {best:.6e})")]
    Infeasible { message: String, best: f64 },

    #[error("integration fault at t = {t:.9} s: {message}")]
    IntegrationFault {
        t: f64,
        message: String,
        state: Box<SystemState>,
    },

    #[error("trace too short: {0}")]
    TraceTooShort(String),

    #[error("{0}")]
    Usage(String),
}

fn format_violations(v: &[Violation]) -> String {
    v.iter()
        .map(|v| format!("  {}: {}", v.path, v.reason))
        .collect::<Vec<_>>()
        .join("\n")
}

impl Error {
    pub(crate) fn parse(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            key: key.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
