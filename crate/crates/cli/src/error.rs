use std::path::Path;

/// Failure of one command, carrying its exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("config key `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("{path}: {source}")]
    Data { path: String, source: sofas::Error },

    #[error(transparent)]
    Core(#[from] sofas::Error),

    #[error("internal invariant breached: {0}")]
    Internal(String),
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Data { path: path.display().to_string(), source: e.into() }
    }

    pub fn data(path: &Path, source: sofas::Error) -> Self {
        CliError::Data { path: path.display().to_string(), source }
    }

    /// 1 for usage and configuration, 2 for bad data, 3 for broken invariants.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config { .. } => 1,
            CliError::Data { source: sofas::Error::Config { .. }, .. } | CliError::Core(sofas::Error::Config { .. }) => 1,
            CliError::Data { .. } | CliError::Core(_) => 2,
            CliError::Internal(_) => 3,
        }
    }
}
