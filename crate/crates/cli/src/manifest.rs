use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::args::Command;
use crate::{CliError, CliResult, RUN_MANIFEST_FILE};

/// Record of one successful command run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command_name: String,
    /// Fully resolved command, defaults included; replayable as is.
    pub config: Command,
    pub seed: Option<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub threads: usize,
    pub tool_version: String,
    pub wall_clock_seconds: f64,
}

impl RunManifest {
    pub fn write(&self, dir: &Path) -> CliResult<PathBuf> {
        let path = dir.join(RUN_MANIFEST_FILE);
        let json = serde_json::to_string_pretty(self).map_err(|source| CliError::Json {
            path: path.clone(),
            source,
        })?;
        fs::write(&path, json + "\n").map_err(CliError::io(&path))?;
        Ok(path)
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(CliError::io(path))?;
        serde_json::from_str(&text).map_err(|source| CliError::Json {
            path: path.to_path_buf(),
            source,
        })
    }
}
