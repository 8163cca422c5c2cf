use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs} vs {rhs}")]
    Dimension {
        op: &'static str,
        lhs: String,
        rhs: String,
    },

    #[error("index out of range in {op}: {index} >= {bound}")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed tensor header: {0}")]
    MalformedHeader(String),

    #[error("tensor payload length mismatch: expected {expected} bytes, found {found}")]
    LengthMismatch { expected: u64, found: u64 },

    #[error("dtype mismatch: file holds {found}, caller asked for {expected}")]
    DtypeMismatch {
        expected: &'static str,
        found: &'static str,
    },

    #[error("loss must be a scalar, got shape {0}")]
    NonScalarLoss(String),

    #[error("op `{0}` has no backward rule")]
    UnsupportedOp(&'static str),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("config error at line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("training diverged at iteration {iter} (loss = {loss})")]
    Diverged { iter: usize, loss: f64 },
}

impl Error {
    /// Stable numeric code per error class.
    pub fn code(&self) -> u32 {
        match self {
            Error::Dimension { .. } => 10,
            Error::Index { .. } => 11,
            Error::Contract(_) => 12,
            Error::Io { .. } => 20,
            Error::MalformedHeader(_) => 21,
            Error::LengthMismatch { .. } => 22,
            Error::DtypeMismatch { .. } => 23,
            Error::NonScalarLoss(_) => 30,
            Error::UnsupportedOp(_) => 31,
            Error::Validation(_) => 40,
            Error::Config { .. } => 41,
            Error::Diverged { .. } => 50,
        }
    }

    pub(crate) fn dim(
        op: &'static str,
        lhs: impl std::fmt::Debug,
        rhs: impl std::fmt::Debug,
    ) -> Self {
        Error::Dimension {
            op,
            lhs: format!("{lhs:?}"),
            rhs: format!("{rhs:?}"),
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
