use std::io;

use thiserror::Error;

use crate::app_model::FunctionId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error: {0}")]
    Parse(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("unknown screen `{0}`")]
    UnknownScreen(String),

    #[error("unknown function id {0}")]
    UnknownFunction(FunctionId),

    #[error("invalid action: {0}")]
    InvalidAction(String),

    #[error("infeasible generator spec: {0}")]
    Infeasible(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty candidate action set")]
    EmptyCandidates,

    #[error("sequence chain broken at step {index}")]
    ChainBreak { index: usize },

    #[error("sequence is sealed")]
    Sealed,

    #[error("replay buffer holds {size} tuples, {required} required before sampling")]
    BufferUnderfilled { size: usize, required: usize },

    #[error("checkpoint digest mismatch")]
    Digest,

    #[error("checkpoint format: {0}")]
    CheckpointFormat(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("remote error {code}: {message}")]
    Remote { code: String, message: String },

    #[error("unknown changed set `{0}`")]
    UnknownChangedSet(String),

    #[error("report mismatch: {0}")]
    ReportMismatch(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by bad input rather than runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Parse(_)
                | Error::Validation(_)
                | Error::UnknownScreen(_)
                | Error::UnknownFunction(_)
                | Error::InvalidAction(_)
                | Error::Infeasible(_)
                | Error::Config(_)
                | Error::UnknownChangedSet(_)
                | Error::ReportMismatch(_)
                | Error::Json(_)
        )
    }
}
