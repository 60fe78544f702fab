use std::fmt;

/// Errors produced while reading, generating or processing event streams.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("timestamp regression at index {index}: {current} < {previous}")]
    Ordering {
        index: usize,
        previous: u64,
        current: u64,
    },

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("invalid config key `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("undefined error metric: {0}")]
    Undefined(UndefinedReason),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Why an error metric could not be evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UndefinedReason {
    ZeroGroundTruth,
    ZeroEstimate,
}

impl fmt::Display for UndefinedReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            UndefinedReason::ZeroGroundTruth => f.write_str("ground-truth flow has zero magnitude"),
            UndefinedReason::ZeroEstimate => f.write_str("estimated flow has zero magnitude"),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
