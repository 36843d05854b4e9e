//! Command-line front end for `prs_bridge`: simulate datasets, fit and tune
//! the Bridge sampler, score weights and run the divergence demo.
//!
//! Every command writes a `run_manifest.json` into its output directory;
//! `replay` re-runs a command from such a manifest.

pub mod args;
pub mod commands;
pub mod manifest;

use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub use args::{Cli, Command};
pub use commands::run_command;
pub use manifest::RunManifest;

/// Environment variable consulted when `--threads` is not given.
pub const THREADS_ENV: &str = "PRS_BRIDGE_THREADS";
pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] prs_bridge::Error),
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Core(e) => match e.kind() {
                prs_bridge::ErrorKind::Usage => EXIT_USAGE,
                prs_bridge::ErrorKind::Data => EXIT_DATA,
                prs_bridge::ErrorKind::Numerical => EXIT_NUMERICAL,
            },
            CliError::Io { .. } | CliError::Json { .. } => EXIT_DATA,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Resolves the worker count: flag, then environment, then available cores.
pub fn resolve_threads(flag: Option<usize>) -> CliResult<usize> {
    let n = match flag {
        Some(n) => n,
        None => match std::env::var(THREADS_ENV) {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("{THREADS_ENV}={v:?} is not a thread count")))?,
            Err(_) => std::thread::available_parallelism().map_or(1, |n| n.get()),
        },
    };
    if n == 0 {
        return Err(CliError::Usage("thread count must be at least 1".into()));
    }
    Ok(n)
}

/// Parses arguments already split by the shell and runs the command inside
/// a dedicated rayon pool.
pub fn run(cli: Cli) -> CliResult<()> {
    let threads = resolve_threads(cli.threads)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start {threads} worker threads: {e}")))?;
    pool.install(|| run_command(&cli.command, threads))
}
