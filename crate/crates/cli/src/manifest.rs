//! Run manifest: written once when a run starts, never modified. The end
//! time goes to a separate `finished.json`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Result;
use ida_core::checkpoint::write_atomic;
use ida_core::trainer::RunConfig;
use serde::{Deserialize, Serialize};

use crate::UsageError;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FINISHED_FILE: &str = "finished.json";

/// `git describe` of the source tree at build time.
pub const CODE_VERSION: &str = env!("IDA_CODE_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub code_version: String,
    pub tool_version: String,
    pub seeds: Vec<u64>,
    pub started_at: String,
    /// Checkpoint this run continues from, if any.
    pub resumed_from: Option<PathBuf>,
    pub inputs: BTreeMap<String, PathBuf>,
    /// Files this run writes, relative to the run directory.
    pub outputs: BTreeMap<String, PathBuf>,
    pub config: RunConfig,
}

impl RunManifest {
    pub fn new(command: &str, config: &RunConfig, seeds: Vec<u64>) -> Self {
        RunManifest {
            command: command.to_string(),
            argv: std::env::args().collect(),
            code_version: CODE_VERSION.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seeds,
            started_at: now(),
            resumed_from: None,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            config: config.clone(),
        }
    }

    pub fn input(mut self, name: &str, path: &Path) -> Self {
        self.inputs.insert(name.into(), path.to_path_buf());
        self
    }

    pub fn output(mut self, name: &str, file: &str) -> Self {
        self.outputs.insert(name.into(), PathBuf::from(file));
        self
    }

    /// Writes `file_name` in `dir` atomically; refuses to replace an existing one.
    pub fn write_new(&self, dir: &Path, file_name: &str) -> Result<PathBuf> {
        let path = dir.join(file_name);
        if path.exists() {
            return Err(UsageError(format!(
                "{} already exists; choose a fresh output directory or pass --resume",
                path.display()
            ))
            .into());
        }
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        write_atomic(&path, &bytes)?;
        Ok(path)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Finished {
    pub finished_at: String,
    pub iteration: u64,
}

pub fn write_finished(dir: &Path, iteration: u64) -> Result<()> {
    let f = Finished {
        finished_at: now(),
        iteration,
    };
    let mut bytes = serde_json::to_vec_pretty(&f)?;
    bytes.push(b'\n');
    write_atomic(&dir.join(FINISHED_FILE), &bytes)?;
    Ok(())
}

pub fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}
