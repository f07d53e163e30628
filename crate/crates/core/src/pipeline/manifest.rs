use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::hash::sha256_hex;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOCK_FILE: &str = ".lock";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    /// Fingerprint of everything the stage read.
    pub input_fingerprint: String,
    /// Run-relative path to sha256 of each produced file.
    pub outputs: BTreeMap<String, String>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub tool_version: String,
    pub config_fingerprint: String,
    /// Resolved configuration after command-line overrides.
    pub config: serde_json::Value,
    pub stages: BTreeMap<String, StageRecord>,
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).at(path)?))
}

impl RunManifest {
    pub fn new(run_id: &str, config_fingerprint: String, config: serde_json::Value) -> Self {
        RunManifest {
            run_id: run_id.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_fingerprint,
            config,
            stages: BTreeMap::new(),
        }
    }

    pub fn load(run_dir: &Path) -> Result<Option<Self>> {
        let path = run_dir.join(MANIFEST_FILE);
        if !path.is_file() {
            return Ok(None);
        }
        Ok(Some(serde_json::from_slice(&fs::read(&path).at(&path)?)?))
    }

    pub fn save(&self, run_dir: &Path) -> Result<()> {
        let path = run_dir.join(MANIFEST_FILE);
        fs::write(&path, serde_json::to_vec_pretty(self)?).at(&path)
    }

    /// Whether `stage` already ran on `input` and its outputs are intact.
    pub fn is_current(&self, run_dir: &Path, stage: &str, input: &str) -> bool {
        let Some(rec) = self.stages.get(stage) else { return false };
        rec.input_fingerprint == input
            && rec
                .outputs
                .iter()
                .all(|(rel, hash)| file_sha256(&run_dir.join(rel)).is_ok_and(|h| &h == hash))
    }

    pub fn record(&mut self, run_dir: &Path, stage: &str, input: String, outputs: &[PathBuf], seconds: f64) -> Result<()> {
        let mut hashes = BTreeMap::new();
        for path in outputs {
            let rel = path.strip_prefix(run_dir).unwrap_or(path).to_string_lossy().replace('\\', "/");
            hashes.insert(rel, file_sha256(path)?);
        }
        self.stages.insert(
            stage.to_string(),
            StageRecord {
                input_fingerprint: input,
                outputs: hashes,
                seconds,
            },
        );
        Ok(())
    }

    /// Every listed file exists and matches its hash.
    pub fn verify(&self, run_dir: &Path) -> Result<()> {
        for rec in self.stages.values() {
            for (rel, hash) in &rec.outputs {
                let path = run_dir.join(rel);
                let actual = file_sha256(&path)?;
                if &actual != hash {
                    return Err(Error::FingerprintMismatch {
                        what: rel.clone(),
                        expected: hash.clone(),
                        actual,
                    });
                }
            }
        }
        Ok(())
    }
}

/// Exclusive claim on a run directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(run_dir: &Path) -> Result<Self> {
        fs::create_dir_all(run_dir).at(run_dir)?;
        let path = run_dir.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => {
                fs::write(&path, std::process::id().to_string()).at(&path)?;
                Ok(RunLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(run_dir.to_path_buf())),
            Err(e) => Err(e).at(&path),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
