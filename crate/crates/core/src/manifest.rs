// SPDX-License-Identifier: MIT OR Apache-2.0

//! Run manifest: every artifact a command writes, with its content hash.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::config::Seeds;
use crate::error::{Error, Result};
use crate::io;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub sha256: String,
    /// Command that produced it.
    pub stage: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub toolkit_version: String,
    pub config_hash: String,
    pub model_id: String,
    pub seeds: Seeds,
    /// Keyed by path relative to the run directory.
    pub artifacts: BTreeMap<String, ArtifactEntry>,
    /// Unix seconds at which each stage last finished.
    pub timestamps: BTreeMap<String, u64>,
    pub wall_time_secs: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn new(config_hash: &str, model_id: &str, seeds: Seeds) -> Self {
        RunManifest {
            toolkit_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: config_hash.to_string(),
            model_id: model_id.to_string(),
            seeds,
            artifacts: BTreeMap::new(),
            timestamps: BTreeMap::new(),
            wall_time_secs: BTreeMap::new(),
        }
    }

    pub fn path(run_dir: &Path) -> PathBuf {
        run_dir.join(MANIFEST_FILE)
    }

    pub fn load(run_dir: &Path) -> Result<Self> {
        let path = Self::path(run_dir);
        if !path.is_file() {
            return Err(Error::MissingArtifacts(vec![path.display().to_string()]));
        }
        Ok(serde_json::from_str(&io::read_to_string(&path)?)?)
    }

    /// Existing manifest for this config, or a fresh one.
    pub fn load_or_new(run_dir: &Path, config_hash: &str, model_id: &str, seeds: Seeds) -> Result<Self> {
        match Self::load(run_dir) {
            Ok(m) if m.config_hash == config_hash => Ok(m),
            Ok(m) => Err(Error::Config(format!(
                "run directory {} belongs to config {}",
                run_dir.display(),
                m.config_hash
            ))),
            Err(Error::MissingArtifacts(_)) => Ok(Self::new(config_hash, model_id, seeds)),
            Err(e) => Err(e),
        }
    }

    pub fn save(&self, run_dir: &Path) -> Result<()> {
        io::write_json(&Self::path(run_dir), self)
    }

    /// Hash `rel` (relative to `run_dir`) and record it under `stage`.
    pub fn record(&mut self, run_dir: &Path, rel: &str, stage: &str) -> Result<()> {
        let sha256 = io::sha256_file(&run_dir.join(rel))?;
        self.artifacts.insert(
            rel.to_string(),
            ArtifactEntry {
                sha256,
                stage: stage.to_string(),
            },
        );
        Ok(())
    }

    pub fn finish_stage(&mut self, stage: &str, wall_secs: f64) {
        let now = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_secs());
        self.timestamps.insert(stage.to_string(), now);
        self.wall_time_secs.insert(stage.to_string(), wall_secs);
    }

    pub fn artifact_hashes(&self) -> BTreeMap<&str, &str> {
        self.artifacts
            .iter()
            .map(|(k, v)| (k.as_str(), v.sha256.as_str()))
            .collect()
    }

    /// Listed artifacts that are absent or whose content changed.
    pub fn gaps(&self, run_dir: &Path) -> Vec<String> {
        self.artifacts
            .iter()
            .filter(|(rel, entry)| {
                io::sha256_file(&run_dir.join(rel)).map_or(true, |h| h != entry.sha256)
            })
            .map(|(rel, _)| rel.clone())
            .collect()
    }

    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.artifacts
            .keys()
            .filter(move |k| k.starts_with(prefix))
            .map(String::as_str)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn records_and_detects_gaps() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = RunManifest::new("abc", "toy", Seeds::default());
        io::write_bytes(&dir.path().join("a/b.txt"), b"hi").unwrap();
        m.record(dir.path(), "a/b.txt", "test").unwrap();
        assert!(m.gaps(dir.path()).is_empty());
        m.save(dir.path()).unwrap();
        assert_eq!(RunManifest::load(dir.path()).unwrap(), m);
        std::fs::write(dir.path().join("a/b.txt"), b"changed").unwrap();
        assert_eq!(m.gaps(dir.path()), vec!["a/b.txt".to_string()]);
        assert!(RunManifest::load_or_new(dir.path(), "other", "toy", Seeds::default()).is_err());
    }
}
