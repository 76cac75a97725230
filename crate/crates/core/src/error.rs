use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left} vs {right}")]
    DimMismatch {
        op: &'static str,
        left: usize,
        right: usize,
    },

    #[error("{op} requires a nonempty input")]
    EmptyInput { op: &'static str },

    #[error("{path}: row {row}: {msg}")]
    MalformedRow {
        path: PathBuf,
        row: usize,
        msg: String,
    },

    #[error("{path}: row {row}: column `{column}` must be 0 or 1, found `{value}`")]
    NonBinary {
        path: PathBuf,
        row: usize,
        column: String,
        value: String,
    },

    #[error("{path}: embedding file truncated or oversized: expected {expected} bytes, found {found}")]
    EmbeddingLength {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid {what}: {msg}")]
    Invalid { what: &'static str, msg: String },

    #[error("not enough samples with s={group}: requested {requested}, available {available} (short by {})", requested - available)]
    InsufficientSamples {
        group: u8,
        requested: usize,
        available: usize,
    },

    #[error("sensitive group s={group} is empty")]
    MissingGroup { group: u8 },

    #[error("training diverged at round {round}, client {client}: {detail}")]
    Divergence {
        round: usize,
        client: usize,
        detail: String,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("oracle: {0}")]
    Oracle(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn invalid(what: &'static str, msg: impl Into<String>) -> Self {
        Error::Invalid {
            what,
            msg: msg.into(),
        }
    }

    /// True for errors caused by bad user input (configs, files, flags)
    /// rather than by a failure during computation.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::MalformedRow { .. }
                | Error::NonBinary { .. }
                | Error::EmbeddingLength { .. }
                | Error::Format { .. }
                | Error::Invalid { .. }
                | Error::Config(_)
                | Error::Oracle(_)
                | Error::Json(_)
        )
    }
}
