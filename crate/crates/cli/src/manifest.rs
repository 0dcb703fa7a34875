//! The run manifest: config hash, stage checkpoints with content hashes,
//! report files, per-stage wall clock, and the seed ledger. Every artifact a
//! stage depends on is hash-verified before that stage starts.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageEntry {
    pub path: PathBuf,
    pub sha256: String,
    pub iterations: u64,
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportEntry {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub stages: BTreeMap<String, StageEntry>,
    pub reports: BTreeMap<String, ReportEntry>,
    pub seeds: BTreeMap<String, u64>,
}

pub fn file_hash(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path)
        .map_err(|e| CliError::Other(format!("cannot hash {}: {e}", path.display())))?;
    Ok(xct_core::content_hash_bytes(&bytes))
}

impl RunManifest {
    pub fn path_in(out_dir: &Path) -> PathBuf {
        out_dir.join("manifest.json")
    }

    pub fn load_or_default(out_dir: &Path, config_hash: &str) -> Result<Self, CliError> {
        let path = Self::path_in(out_dir);
        if !path.exists() {
            return Ok(RunManifest {
                config_hash: config_hash.to_string(),
                ..RunManifest::default()
            });
        }
        let text = std::fs::read_to_string(&path)
            .map_err(|e| CliError::Other(format!("cannot read manifest: {e}")))?;
        let manifest: RunManifest = serde_json::from_str(&text)
            .map_err(|e| CliError::Other(format!("bad manifest: {e}")))?;
        if manifest.config_hash != config_hash {
            return Err(CliError::config(
                "manifest was produced by a different config; use a fresh out_dir",
            ));
        }
        Ok(manifest)
    }

    pub fn save(&self, out_dir: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(Self::path_in(out_dir), text)
            .map_err(|e| CliError::Other(format!("cannot write manifest: {e}")))?;
        Ok(())
    }

    pub fn record_stage(
        &mut self,
        name: &str,
        path: PathBuf,
        iterations: u64,
        wall_clock_secs: f64,
    ) -> Result<(), CliError> {
        let sha256 = file_hash(&path)?;
        self.stages.insert(
            name.to_string(),
            StageEntry {
                path,
                sha256,
                iterations,
                wall_clock_secs,
            },
        );
        Ok(())
    }

    pub fn record_report(&mut self, name: &str, path: PathBuf) -> Result<(), CliError> {
        let sha256 = file_hash(&path)?;
        self.reports.insert(name.to_string(), ReportEntry { path, sha256 });
        Ok(())
    }

    /// Resolve a stage checkpoint, verifying existence and content hash.
    pub fn verified_stage(&self, name: &str) -> Result<&StageEntry, CliError> {
        let entry = self.stages.get(name).ok_or_else(|| {
            CliError::dependency(format!(
                "stage {name} has not been trained (missing from manifest)"
            ))
        })?;
        if !entry.path.exists() {
            return Err(CliError::dependency(format!(
                "stage {name} checkpoint {} is missing",
                entry.path.display()
            )));
        }
        let actual = file_hash(&entry.path)?;
        if actual != entry.sha256 {
            return Err(CliError::dependency(format!(
                "stage {name} checkpoint {} fails hash verification",
                entry.path.display()
            )));
        }
        Ok(entry)
    }
}
