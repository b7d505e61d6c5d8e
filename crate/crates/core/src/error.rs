use thiserror::Error;

/// Errors produced by the simulator library.
#[derive(Debug, Error)]
pub enum Error {
    /// The model graph violates a structural requirement (cycle, dangling
    /// edge, unreachable output, bad topological order).
    #[error("malformed model graph: {0}")]
    Structural(String),

    /// A latency profile entry is missing or out of range.
    #[error("invalid latency profile: {0}")]
    Profile(String),

    /// A trace record failed validation.
    #[error("record {id}: {field}: {reason}")]
    Validation {
        id: u64,
        field: String,
        reason: String,
    },

    /// A caller-supplied parameter is outside its domain.
    #[error("invalid parameter `{name}`: {reason}")]
    Parameter { name: String, reason: String },

    /// An operation was asked to work on an empty input where that is undefined.
    #[error("empty input: {0}")]
    Empty(&'static str),

    /// The exhaustive grid search would exceed its configured size cap.
    #[error("grid search over {points} lattice points exceeds cap of {cap}")]
    ExplosionCap { points: f64, cap: u64 },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path} at line {line}: {source}")]
    Parse {
        path: String,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn param(name: &str, reason: impl Into<String>) -> Self {
        Error::Parameter {
            name: name.to_string(),
            reason: reason.into(),
        }
    }

    pub(crate) fn validation(id: u64, field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Validation {
            id,
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
