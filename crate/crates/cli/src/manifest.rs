use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const MANIFEST_FILE: &str = "manifest.json";

/// What produced a run directory, with everything needed to rerun it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    /// Fully resolved configuration.
    pub config: Value,
    pub seed: Option<u64>,
    pub code_version: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    /// Output paths relative to the run directory.
    pub outputs: Vec<String>,
}

pub fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

impl RunManifest {
    pub fn begin(command: &str, config: Value, seed: Option<u64>) -> Self {
        Self {
            command: command.to_string(),
            args: std::env::args().collect(),
            config,
            seed,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            started_unix: now_unix(),
            finished_unix: 0,
            outputs: Vec::new(),
        }
    }

    /// Stamps the finish time and writes `manifest.json` into `dir`, replacing any previous one.
    pub fn finish(mut self, dir: &Path, outputs: Vec<String>) -> Result<()> {
        self.finished_unix = now_unix();
        self.outputs = outputs;
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(&self)?)
            .with_context(|| format!("writing {}", path.display()))
    }
}
