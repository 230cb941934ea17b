//! Reproducible experiment runs over the `mmfuse` library: dataset
//! generation, training, probing, similarity, saliency and run reports.

pub mod commands;
pub mod config;
pub mod output;
pub mod report;

use std::fmt;

pub use config::{RunConfig, SaliencyConfig};

/// Failure of a command, split by exit code.
#[derive(Debug)]
pub enum CliError {
    /// Invalid configuration or arguments; exit code 2.
    Config(anyhow::Error),
    /// Anything that failed while running; exit code 1.
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }

    /// Config errors from the library anywhere in the chain keep exit code 2.
    pub fn classify(err: anyhow::Error) -> Self {
        let is_config = err
            .chain()
            .any(|e| matches!(e.downcast_ref::<mmfuse::Error>(), Some(mmfuse::Error::Config(_))));
        if is_config {
            CliError::Config(err)
        } else {
            CliError::Runtime(err)
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(e) => write!(f, "config error: {e:#}"),
            CliError::Runtime(e) => write!(f, "error: {e:#}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<mmfuse::Error> for CliError {
    fn from(e: mmfuse::Error) -> Self {
        CliError::classify(e.into())
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::classify(e)
    }
}

/// Reads `MMFUSE_THREADS` and sizes the global worker pool.
pub fn init_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("MMFUSE_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(anyhow::anyhow!("MMFUSE_THREADS must be a positive integer, got '{raw}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Runtime(e.into()))
}
