use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad invocation or configuration; exit code 2.
    #[error("{0}")]
    Usage(String),

    #[error("config {path}: {msg}")]
    Config { path: PathBuf, msg: String },

    #[error("cannot read {path}: {source}")]
    Input { path: PathBuf, source: std::io::Error },

    #[error("cannot write {path}: {source}")]
    Output { path: PathBuf, source: std::io::Error },

    #[error("{0}")]
    CheckFailed(String),

    #[error(transparent)]
    Core(#[from] dmsc_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        use dmsc_core::Error as E;
        match self {
            CliError::Usage(_) | CliError::Config { .. } | CliError::Input { .. } => 2,
            CliError::Output { .. } | CliError::CheckFailed(_) => 1,
            CliError::Core(e) => match e {
                E::Config(_)
                | E::Parse { .. }
                | E::Order { .. }
                | E::Checkpoint(_)
                | E::Shape(_)
                | E::InputTooShort(_)
                | E::EmptySplit(_)
                | E::Csv(_) => 2,
                E::Io(io) if io.kind() == std::io::ErrorKind::NotFound => 2,
                _ => 1,
            },
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
