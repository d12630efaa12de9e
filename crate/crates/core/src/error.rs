use std::path::PathBuf;

/// Errors produced by the simulation, fitting and I/O layers.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("position {position:?} of particle {particle} is outside the grid domain")]
    Domain { particle: usize, position: [f64; 3] },

    #[error("numerical error at particle {particle}: {what}")]
    Numerical { particle: usize, what: String },

    #[error("rollout diverged at frame {frame}: {reason}")]
    Divergence { frame: usize, reason: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("bundle validation failed: {0}")]
    Validation(String),

    #[error("array group `{group}`: {reason}")]
    ArrayGroup { group: String, reason: String },

    #[error("malformed message: {0}")]
    Message(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }
}
