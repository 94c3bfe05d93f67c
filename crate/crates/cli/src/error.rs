use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] gapfill::Error),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// 2 for configuration and input errors, 3 for numeric divergence, 4 for I/O
    /// and unreadable files.
    pub fn exit_code(&self) -> u8 {
        use gapfill::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Io { .. } => 4,
            CliError::Core(e) => match e {
                E::Diverged { .. } => 3,
                E::Io(_) | E::BadMagic { .. } | E::MalformedHeader(_) => 4,
                _ => 2,
            },
        }
    }
}
