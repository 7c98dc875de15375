//! Library side of the `givf` command: configuration and the command
//! pipeline, kept separate from argument parsing so it can be driven from
//! tests.

pub mod commands;
pub mod config;
mod manifest;

use std::path::PathBuf;

pub use commands::{cmd_build, cmd_eval, cmd_gt, cmd_info, cmd_search, cmd_train};
pub use config::{load_config, RunConfig};
pub use manifest::Manifest;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid config `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] givf_core::Error),

    #[error("self-check failed: {0}")]
    SelfCheck(String),
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_INVARIANT: i32 = 3;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use givf_core::Error as E;
        match self {
            CliError::Config { .. } => EXIT_VALIDATION,
            CliError::Io { .. } => EXIT_IO,
            CliError::SelfCheck(_) => EXIT_INVARIANT,
            CliError::Core(e) => match e {
                E::Io(_) | E::Format { .. } | E::BadMagic | E::VersionMismatch { .. } | E::ChecksumMismatch { .. } => {
                    EXIT_IO
                }
                E::Invariant(_) => EXIT_INVARIANT,
                _ => EXIT_VALIDATION,
            },
        }
    }
}
