use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::Result;
use serde::{Deserialize, Serialize};

use crate::formats::{to_json_pretty, write_atomic};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Record of one artifact-producing command. Timestamps are the only
/// field that differs between identical reruns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub tool_version: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub corpus_checksum: Option<String>,
    pub checkpoint: Option<String>,
    pub outputs: Vec<String>,
    pub started_at: u64,
    pub finished_at: u64,
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl RunManifest {
    pub fn begin(command: &str, argv: &[String]) -> Self {
        Self {
            command: command.to_string(),
            argv: argv.to_vec(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config: serde_json::Value::Null,
            seed: None,
            corpus_checksum: None,
            checkpoint: None,
            outputs: Vec::new(),
            started_at: unix_now(),
            finished_at: 0,
        }
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    pub fn finish(mut self, dir: &Path) -> Result<()> {
        self.finished_at = unix_now();
        write_atomic(&dir.join(MANIFEST_FILE), &to_json_pretty(&self)?)
    }
}
