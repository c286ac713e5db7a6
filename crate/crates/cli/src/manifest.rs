//! Run manifests: enough recorded state to replay any command bit-exactly.

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Fully resolved argument list: `ctlab <command> <arguments...>`
    /// reproduces the run, defaults included.
    pub arguments: Vec<String>,
    pub seeds: BTreeMap<String, u64>,
    /// Output files, relative to the output directory.
    pub artifacts: Vec<String>,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
}

fn now_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

pub struct ManifestBuilder {
    command: String,
    arguments: Vec<String>,
    seeds: BTreeMap<String, u64>,
    artifacts: Vec<String>,
    started_unix_ms: u128,
}

impl ManifestBuilder {
    pub fn new(command: &str) -> Self {
        ManifestBuilder {
            command: command.to_string(),
            arguments: Vec::new(),
            seeds: BTreeMap::new(),
            artifacts: Vec::new(),
            started_unix_ms: now_ms(),
        }
    }

    pub fn arg(&mut self, flag: &str, value: impl ToString) -> &mut Self {
        self.arguments.push(flag.to_string());
        self.arguments.push(value.to_string());
        self
    }

    pub fn flag(&mut self, flag: &str) -> &mut Self {
        self.arguments.push(flag.to_string());
        self
    }

    pub fn seed(&mut self, name: &str, value: u64) -> &mut Self {
        self.seeds.insert(name.to_string(), value);
        self
    }

    /// Record an artifact path, stored relative to `out_dir`.
    pub fn artifact(&mut self, out_dir: &Path, path: &Path) -> &mut Self {
        let rel = path.strip_prefix(out_dir).unwrap_or(path);
        self.artifacts.push(rel.to_string_lossy().into_owned());
        self
    }

    /// Write `<out_dir>/manifests/<run_name>.json`.
    pub fn write(&self, out_dir: &Path, run_name: Option<&str>) -> Result<PathBuf> {
        let manifest = RunManifest {
            command: self.command.clone(),
            arguments: self.arguments.clone(),
            seeds: self.seeds.clone(),
            artifacts: self.artifacts.clone(),
            started_unix_ms: self.started_unix_ms,
            finished_unix_ms: now_ms(),
        };
        let dir = out_dir.join("manifests");
        std::fs::create_dir_all(&dir).context("creating manifests directory")?;
        let name = run_name.unwrap_or(&self.command);
        let path = dir.join(format!("{name}.json"));
        let text = serde_json::to_string_pretty(&manifest).context("serializing run manifest")?;
        std::fs::write(&path, text)
            .with_context(|| format!("writing run manifest {}", path.display()))?;
        Ok(path)
    }
}

