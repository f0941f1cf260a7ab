use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid parameter `{name}`: {reason}")]
    Parameter { name: String, reason: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("tape contract violated: {0}")]
    Contract(String),

    #[error("tape state error: {0}")]
    State(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("ingestion error in {path} at row {row}, column {column}: {reason}")]
    Ingest {
        path: PathBuf,
        row: usize,
        column: usize,
        reason: String,
    },

    #[error("ordering error in {path}: timestamp at row {row} is not after its predecessor")]
    Ordering { path: PathBuf, row: usize },

    #[error("degenerate channel {channel}: zero variance in training range")]
    DegenerateChannel { channel: usize },

    #[error("checkpoint format error at `{entry}`: {reason}")]
    Format { entry: String, reason: String },

    #[error("index {index} out of range (len {len})")]
    Index { index: usize, len: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn param(name: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Parameter {
            name: name.into(),
            reason: reason.into(),
        }
    }

    /// Coarse classification used by the command-line front end for exit codes.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::Parameter { .. } => ErrorKind::Config,
            Error::Ingest { .. }
            | Error::Ordering { .. }
            | Error::DegenerateChannel { .. }
            | Error::Csv(_)
            | Error::Io(_)
            | Error::Index { .. } => ErrorKind::Data,
            Error::Numeric(_) => ErrorKind::Numeric,
            Error::Shape { .. }
            | Error::Contract(_)
            | Error::State(_)
            | Error::Format { .. }
            | Error::Json(_) => ErrorKind::Other,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
    Other,
}
