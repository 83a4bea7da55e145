use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};

pub const MANIFEST_SCHEMA: u32 = 1;

/// Record of one command invocation. `config` is the parsed command itself,
/// so `splatnav replay` can run it again.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema: u32,
    pub version: String,
    pub command: String,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub artifacts: Vec<PathBuf>,
    /// Wall-clock seconds per phase.
    pub timings: BTreeMap<String, f64>,
    pub exit_code: u8,
    pub error: Option<String>,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value) -> Self {
        Self {
            schema: MANIFEST_SCHEMA,
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config,
            seeds: Vec::new(),
            artifacts: Vec::new(),
            timings: BTreeMap::new(),
            exit_code: 0,
            error: None,
        }
    }

    pub fn artifact(&mut self, p: impl Into<PathBuf>) {
        self.artifacts.push(p.into());
    }

    pub fn time(&mut self, phase: &str, secs: f64) {
        self.timings.insert(phase.to_string(), secs);
    }

    pub fn write(&self, path: &Path) -> anyhow::Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, serde_json::to_vec_pretty(self)?).with_context(|| format!("writing manifest {}", path.display()))
    }

    pub fn read(path: &Path) -> anyhow::Result<Self> {
        let m: Self = serde_json::from_slice(&std::fs::read(path)?)?;
        anyhow::ensure!(m.schema == MANIFEST_SCHEMA, "manifest schema {} not supported", m.schema);
        Ok(m)
    }
}
