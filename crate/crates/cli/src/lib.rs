//! Ingestion, synthetic corpus generation, checkpoint files, reporting and
//! the command-line front end over `a2v-core`.

pub mod ckpt_file;
pub mod commands;
pub mod config_file;
pub mod manifest;
pub mod png;
pub mod report;
pub mod synth;
pub mod video;
pub mod wav;

/// Errors split by exit code: validation problems exit 1, runtime failures
/// exit 2.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

pub fn validation(e: impl std::fmt::Display) -> CliError {
    CliError::Validation(e.to_string())
}

pub fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}
