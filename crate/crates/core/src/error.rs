use thiserror::Error;

use crate::memory::Category;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("precision mismatch in {op}: {detail}")]
    Precision { op: &'static str, detail: String },

    #[error("consistency error: {0}")]
    Consistency(String),

    /// Simulated device out-of-memory.
    #[error(
        "simulated out-of-memory allocating {requested} bytes for {category}: \
         {in_use} in use, budget {budget}, shortfall {shortfall} bytes"
    )]
    OutOfMemory {
        category: Category,
        requested: u64,
        in_use: u64,
        budget: u64,
        shortfall: u64,
    },

    #[error("ledger usage error: {0}")]
    Usage(String),

    #[error("memory leak detected: {}", fmt_leaks(.0))]
    Leak(Vec<(String, u64)>),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("layer {layer} not ready: {received} of {expected} contributions")]
    NotReady {
        layer: usize,
        received: usize,
        expected: usize,
    },

    #[error("domain error: {param} = {value} ({reason})")]
    Domain {
        param: &'static str,
        value: f64,
        reason: &'static str,
    },

    #[error("plan error: {0}")]
    Plan(String),

    #[error("config error at line {line}, key `{key}`: {message}")]
    Config {
        line: usize,
        key: String,
        message: String,
    },

    #[error("io error: {0}")]
    Io(String),
}

fn fmt_leaks(leaks: &[(String, u64)]) -> String {
    leaks
        .iter()
        .map(|(name, bytes)| format!("{name}={bytes}"))
        .collect::<Vec<_>>()
        .join(", ")
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(err: csv::Error) -> Self {
        Error::Io(err.to_string())
    }
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub fn is_out_of_memory(&self) -> bool {
        matches!(self, Error::OutOfMemory { .. })
    }
}
