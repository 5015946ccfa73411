//! Run registry: one manifest per run at `<workspace>/runs/<run_id>/manifest.json`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{MadError, Result};

/// Record of one command invocation: resolved configuration, input artifact
/// paths, output paths and their content hashes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub command: String,
    /// Unix timestamps (seconds).
    pub created_at: u64,
    pub updated_at: u64,
    /// Fully resolved configuration snapshot.
    pub config: Value,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    /// SHA-256 per output path. Wall-clock-bearing outputs (records, logs)
    /// are listed in `outputs` but omitted here.
    pub output_hashes: BTreeMap<String, String>,
    /// Command-specific state (e.g. meta-train epoch progress).
    #[serde(default)]
    pub extra: BTreeMap<String, Value>,
}

pub fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let mut h = Sha256::new();
    h.update(&bytes);
    Ok(format!("{:x}", h.finalize()))
}

impl RunManifest {
    pub fn new(run_id: &str, command: &str, config: Value) -> Self {
        let now = now_unix();
        Self {
            run_id: run_id.to_string(),
            command: command.to_string(),
            created_at: now,
            updated_at: now,
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
            output_hashes: BTreeMap::new(),
            extra: BTreeMap::new(),
        }
    }

    /// Register an output; `hash=false` exempts wall-clock-bearing artifacts.
    pub fn add_output(&mut self, path: &Path, hash: bool) -> Result<()> {
        let key = path.display().to_string();
        if !self.outputs.contains(&key) {
            self.outputs.push(key.clone());
        }
        if hash {
            self.output_hashes.insert(key, sha256_file(path)?);
        }
        Ok(())
    }

    pub fn add_input(&mut self, path: &Path) {
        let key = path.display().to_string();
        if !self.inputs.contains(&key) {
            self.inputs.push(key);
        }
    }
}

pub fn run_dir(workspace: &Path, run_id: &str) -> PathBuf {
    workspace.join("runs").join(run_id)
}

pub fn manifest_path(workspace: &Path, run_id: &str) -> PathBuf {
    run_dir(workspace, run_id).join("manifest.json")
}

pub fn save_manifest(workspace: &Path, manifest: &RunManifest) -> Result<PathBuf> {
    let dir = run_dir(workspace, &manifest.run_id);
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_vec_pretty(manifest)?)?;
    Ok(path)
}

pub fn load_manifest(workspace: &Path, run_id: &str) -> Result<RunManifest> {
    let path = manifest_path(workspace, run_id);
    let text = std::fs::read_to_string(&path)?;
    serde_json::from_str(&text)
        .map_err(|e| MadError::Integrity(format!("{}: invalid manifest: {e}", path.display())))
}

/// Derive a fresh run id from the command name and the configuration hash.
pub fn derive_run_id(command: &str, config: &Value) -> String {
    let mut h = Sha256::new();
    h.update(command.as_bytes());
    h.update(config.to_string().as_bytes());
    h.update(now_unix().to_le_bytes());
    h.update(std::process::id().to_le_bytes());
    let digest = h.finalize();
    format!("{command}-{:02x}{:02x}{:02x}{:02x}", digest[0], digest[1], digest[2], digest[3])
}
