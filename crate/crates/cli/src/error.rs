use std::path::{Path, PathBuf};

use mbbr_core::Error;
use thiserror::Error;

/// Process exit statuses.
pub mod exit {
    pub const SUCCESS: i32 = 0;
    /// I/O failures and internal errors.
    pub const RUNTIME: i32 = 1;
    /// Bad flags, config file or config values.
    pub const CONFIG: i32 = 2;
    /// Malformed scenes, label tables or checkpoints.
    pub const DATA: i32 = 3;
    /// Non-finite values or diverged training.
    pub const NUMERIC: i32 = 4;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] Error),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.to_path_buf(), source }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => exit::CONFIG,
            CliError::Io { .. } => exit::RUNTIME,
            CliError::Core(e) => match e {
                Error::Config(_) => exit::CONFIG,
                Error::Data { .. }
                | Error::Invalid(_)
                | Error::Shortage { .. }
                | Error::MissingCategory(_)
                | Error::Checkpoint(_)
                | Error::Json(_) => exit::DATA,
                Error::NonFinite { .. } | Error::Diverged(_) => exit::NUMERIC,
                Error::Io { .. } | Error::Dimension { .. } | Error::Index { .. } | Error::Contract(_) | Error::State(_) => {
                    exit::RUNTIME
                }
            },
        }
    }
}
