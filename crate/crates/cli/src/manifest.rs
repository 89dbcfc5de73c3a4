use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const RUN_MANIFEST: &str = "run_manifest.json";
pub const VERSION: &str = env!("ASYMGAN_VERSION");

/// Record of one command invocation, written into its output directory.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub version: String,
    /// Every setting the command ran with, defaults included.
    pub config: serde_json::Value,
    /// SHA-256 of the dataset's `manifest.json`, when a dataset was read.
    pub dataset_manifest_sha256: Option<String>,
    pub checkpoints: Vec<PathBuf>,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub elapsed_secs: f64,
}

pub struct Clock {
    started: SystemTime,
}

impl Clock {
    pub fn start() -> Self {
        Self {
            started: SystemTime::now(),
        }
    }

    pub fn manifest(
        &self,
        command: &str,
        config: serde_json::Value,
        dataset: Option<&Path>,
        checkpoints: Vec<PathBuf>,
    ) -> Result<RunManifest> {
        let now = SystemTime::now();
        let unix = |t: SystemTime| t.duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64());
        Ok(RunManifest {
            command: command.into(),
            argv: std::env::args().collect(),
            version: VERSION.into(),
            config,
            dataset_manifest_sha256: dataset.map(dataset_hash).transpose()?,
            checkpoints,
            started_unix: unix(self.started),
            finished_unix: unix(now),
            elapsed_secs: now.duration_since(self.started).map_or(0.0, |d| d.as_secs_f64()),
        })
    }
}

impl RunManifest {
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(RUN_MANIFEST);
        let json = serde_json::to_string_pretty(self)?;
        fs::write(&path, json + "\n").with_context(|| format!("writing {}", path.display()))
    }
}

/// Hex SHA-256 of `manifest.json` in a dataset directory (or of the file itself).
pub fn dataset_hash(path: &Path) -> Result<String> {
    let file = if path.is_dir() {
        path.join("manifest.json")
    } else {
        path.to_path_buf()
    };
    let bytes = fs::read(&file).with_context(|| format!("reading {}", file.display()))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}
