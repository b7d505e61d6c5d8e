use std::path::Path;

use thiserror::Error;

/// Failures of a CLI invocation, each mapped to a distinct exit status.
#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] exitsim::Error),

    #[error("{0}")]
    Usage(String),

    /// A file parsed but does not hold what the command expects.
    #[error("{path}: {reason}")]
    Input { path: String, reason: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_VALIDATION: u8 = 3;
pub const EXIT_EXPLOSION: u8 = 4;
pub const EXIT_IO: u8 = 5;

impl CliError {
    pub fn exit_code(&self) -> u8 {
        use exitsim::Error as E;
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Input { .. } => EXIT_VALIDATION,
            CliError::Io { .. } => EXIT_IO,
            CliError::Core(e) => match e {
                E::Parameter { .. } | E::Empty(_) => EXIT_USAGE,
                E::Structural(_) | E::Profile(_) | E::Validation { .. } | E::Parse { .. } => EXIT_VALIDATION,
                E::ExplosionCap { .. } => EXIT_EXPLOSION,
                E::Io { .. } => EXIT_IO,
            },
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub fn input(path: &Path, reason: impl Into<String>) -> Self {
        CliError::Input {
            path: path.display().to_string(),
            reason: reason.into(),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
