//! Experiment harness: corpus generation, training runs, sweeps over
//! labeled-set sizes and seeds, CSV results and SVG charts.

pub mod commands;
pub mod config;
pub mod experiment;
pub mod plot;
pub mod results;

use std::path::Path;

use thiserror::Error;

pub use config::{ExperimentConfig, Method};

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad invocation, bad config, or an output location that cannot be used.
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] satlearn::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// 2 for usage and configuration problems, 1 for failures at run time.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Core(satlearn::Error::Config(_)) => 2,
            _ => 1,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

/// First line of every text artifact the harness writes.
pub fn hash_line(kind: &str, hash: &str) -> String {
    format!("# satlearn {kind} {hash}\n")
}

/// Splits off a leading `# satlearn <kind> <hash>` line, returning the hash.
pub fn strip_hash_line<'a>(text: &'a str, kind: &str) -> (Option<&'a str>, &'a str) {
    let prefix = format!("# satlearn {kind} ");
    match text.strip_prefix(prefix.as_str()) {
        Some(rest) => {
            let (hash, body) = rest.split_once('\n').unwrap_or((rest, ""));
            (Some(hash.trim()), body)
        }
        None => (None, text),
    }
}
