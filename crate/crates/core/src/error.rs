use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("history is empty")]
    EmptyHistory,

    #[error("none of the history's beacons are in the model vocabulary")]
    NoKnownBeacons,

    #[error("invalid identifier {0:?}: must be non-empty without whitespace, ',' or ':'")]
    InvalidId(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("cannot access {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("malformed model file: {0}")]
    MalformedModel(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("filtering removed every {0}")]
    FilterTooAggressive(&'static str),

    #[error("cannot initialise {k} clusters from {users} users")]
    InitInfeasible { k: usize, users: usize },

    #[error("non-finite value at iteration {iteration}: {what}")]
    NumericalFailure { iteration: usize, what: String },

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("zero vector in cosine similarity")]
    ZeroVector,

    #[error("user sets differ: {0}")]
    UserSetMismatch(String),

    #[error("user {0:?} was not part of training; the classic model cannot score unseen users")]
    UnseenUser(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: message.into(),
        }
    }
}
