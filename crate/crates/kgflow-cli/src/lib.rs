//! Configuration, orchestration, and file emission for the kgflow binary.

pub mod config;
pub mod emit;
pub mod plot;
pub mod runner;

use std::path::PathBuf;

/// Errors surfaced by the binary, partitioned by exit code: configuration
/// and I/O problems exit 1, numerical failures during a flow exit 2.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("failed to {action} {path}: {source}")]
    Io {
        action: &'static str,
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("numerical failure{}: {message}", step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    Numerical {
        message: String,
        step: Option<usize>,
    },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Io { .. } => 1,
            CliError::Numerical { .. } => 2,
        }
    }

    /// Wrap a library error raised while a flow is running.
    pub fn from_flow(err: kgflow::FlowError) -> Self {
        let step = err.step();
        CliError::Numerical {
            message: err.to_string(),
            step,
        }
    }

    /// Wrap a library error raised while building objects from the config.
    pub fn from_setup(err: kgflow::FlowError) -> Self {
        CliError::Config(err.to_string())
    }
}
