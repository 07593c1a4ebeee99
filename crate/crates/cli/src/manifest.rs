use std::fs;
use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use eventshift_core::training::config_hash;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::CliError;

/// Record of one command execution, written as `run-<command>.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config_hash: String,
    pub config: Config,
    /// `--set` arguments as given.
    pub overrides: Vec<String>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub seeds: Vec<u64>,
    pub started_at: String,
    pub finished_at: String,
    /// `"ok"` or the error message.
    pub status: String,
}

pub fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

impl RunManifest {
    pub fn start(command: &str, config: &Config, overrides: &[String]) -> Result<Self, CliError> {
        Ok(Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: config_hash(config)?,
            config: config.clone(),
            overrides: overrides.to_vec(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            seeds: Vec::new(),
            started_at: now(),
            finished_at: String::new(),
            status: String::new(),
        })
    }

    pub fn file_name(command: &str) -> String {
        format!("run-{command}.json")
    }

    /// Writes `run-<command>.json`, or `run-<command>-<n>.json` for the
    /// first free `n ≥ 2` when the command already ran in `run_dir`.
    pub fn write(&self, run_dir: &Path) -> Result<PathBuf, CliError> {
        let mut path = run_dir.join(Self::file_name(&self.command));
        let mut n = 2;
        while path.exists() {
            path = run_dir.join(format!("run-{}-{n}.json", self.command));
            n += 1;
        }
        let text = serde_json::to_string_pretty(self).map_err(|e| CliError::Runtime(e.to_string()))?;
        fs::write(&path, text + "\n")
            .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
    }
}
