use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("unknown {kind} id `{id}`")]
    DanglingId { kind: &'static str, id: String },

    #[error("duplicate {kind} id `{id}`")]
    DuplicateId { kind: &'static str, id: String },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("patient `{0}` has no location but distance encoding was requested")]
    MissingLocation(String),

    #[error("doctor `{0}` has no specialty")]
    NoSpecialty(String),

    #[error("unknown specialty `{0}`")]
    UnknownSpecialty(String),

    #[error("training partition is empty")]
    EmptyTrain,

    #[error("label matrix has no positive entries")]
    EmptyLabels,

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("model file: {0}")]
    ModelFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn parse(path: impl Into<PathBuf>, line: u64, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }
}
