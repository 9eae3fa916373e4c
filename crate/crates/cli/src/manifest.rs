use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::Value;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Provenance record written into every output directory before any long
/// computation starts and rewritten when the command finishes.
#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config: Value,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    pub outputs: Vec<PathBuf>,
    #[serde(skip)]
    dir: PathBuf,
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl RunManifest {
    pub fn start(dir: &Path, command: &str, seed: u64, config: Value) -> Result<Self> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let m = RunManifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config,
            started_unix: now(),
            finished_unix: None,
            outputs: Vec::new(),
            dir: dir.to_path_buf(),
        };
        m.write()?;
        Ok(m)
    }

    pub fn record(&mut self, path: &Path) {
        let rel = path.strip_prefix(&self.dir).unwrap_or(path);
        self.outputs.push(rel.to_path_buf());
    }

    pub fn finish(mut self) -> Result<()> {
        self.finished_unix = Some(now());
        self.write()
    }

    fn write(&self) -> Result<()> {
        let path = self.dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }
}

/// Writes `contents` to `dir/name` and records it in the manifest.
pub fn emit(manifest: &mut RunManifest, dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    std::fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
    manifest.record(&path);
    Ok(path)
}
