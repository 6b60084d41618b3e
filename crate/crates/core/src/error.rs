use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration field is invalid or inconsistent with another field.
    #[error("invalid config `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("capacity: requested {requested} but only {available} available ({what})")]
    Capacity {
        what: String,
        requested: usize,
        available: usize,
    },

    #[error("{what} out of range: {detail}")]
    Range { what: String, detail: String },

    #[error("dimension mismatch: {what} expected {expected}, got {got}")]
    Dimension {
        what: String,
        expected: usize,
        got: usize,
    },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("fit error: {0}")]
    Fit(String),

    #[error("degenerate estimate: {0}")]
    Degenerate(String),

    #[error("malformed token sequence: {0}")]
    Sequence(String),

    #[error("RVQ order violation at interior index {index}: expected level {expected}, found {found}")]
    OrderViolation {
        index: usize,
        expected: usize,
        found: String,
    },

    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("model: {0}")]
    Model(String),

    #[error("data error in utterance `{utterance}`: {reason}")]
    Data { utterance: String, reason: String },

    #[error("judge: {0}")]
    Judge(String),

    #[error("judge response is not an integer: {raw:?}")]
    JudgeParse { raw: String },

    #[error("judge score {score} outside 1..=10 (raw response {raw:?})")]
    JudgeRange { score: i64, raw: String },

    #[error("digest mismatch for {path}: manifest {expected}, file {actual}")]
    Digest {
        path: PathBuf,
        expected: String,
        actual: String,
    },

    #[error("missing artifact {path}: {reason}")]
    MissingArtifact { path: PathBuf, reason: String },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn range(what: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Range {
            what: what.into(),
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
