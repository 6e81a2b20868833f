//! Run manifests: every output directory carries exactly one record of the
//! command, the fully resolved configuration and the content hashes needed
//! to re-run it.

use crate::config::RunConfig;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const MANIFEST_NAME: &str = "run_manifest.json";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    /// The invoked subcommand with its arguments.
    pub command: String,
    /// Fully resolved configuration, embedded as TOML.
    pub config_toml: String,
    pub config_sha256: String,
    /// Hash of the consumed dataset manifest, when a dataset was an input.
    pub dataset_manifest_sha256: Option<String>,
    pub created_utc: String,
    pub deterministic: bool,
    /// Paths of produced artifacts, relative to the manifest directory.
    pub artifacts: Vec<String>,
}

impl RunManifest {
    pub fn new(
        command: &str,
        config: &RunConfig,
        dataset_manifest_sha256: Option<String>,
        deterministic: bool,
    ) -> Result<Self> {
        Ok(RunManifest {
            command: command.to_string(),
            config_toml: config.to_toml()?,
            config_sha256: config.content_hash()?,
            dataset_manifest_sha256,
            created_utc: chrono::Utc::now().format("%Y-%m-%dT%H:%M:%SZ").to_string(),
            deterministic,
            artifacts: Vec::new(),
        })
    }

    pub fn push_artifact(&mut self, rel_path: &str) {
        self.artifacts.push(rel_path.to_string());
    }

    pub fn path_in(dir: &Path) -> PathBuf {
        dir.join(MANIFEST_NAME)
    }

    /// Write into `dir`; refuses to produce a second manifest there.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = Self::path_in(dir);
        if path.exists() {
            return Err(Error::InvalidArgument(format!(
                "{} already holds a run manifest; each output directory gets exactly one",
                dir.display()
            )));
        }
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    /// Load and re-verify the embedded config hash.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = Self::path_in(dir);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: RunManifest = serde_json::from_str(&text)?;
        let cfg = RunConfig::from_toml(&m.config_toml)?;
        let recomputed = cfg.content_hash()?;
        if recomputed != m.config_sha256 {
            return Err(Error::CheckpointMismatch(format!(
                "manifest config hash {} does not match recomputed {}",
                m.config_sha256, recomputed
            )));
        }
        Ok(m)
    }

    pub fn config(&self) -> Result<RunConfig> {
        RunConfig::from_toml(&self.config_toml)
    }
}

/// Refuse to reuse a non-empty output directory unless forced.
pub fn claim_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .next()
            .is_some();
        if non_empty && !force {
            return Err(Error::InvalidArgument(format!(
                "output directory {} is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
        if non_empty {
            // forced: clear stale artifacts so the one-manifest rule holds
            std::fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_roundtrip_and_uniqueness() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::toy_desk();
        let mut m = RunManifest::new("train --preset toy-desk", &cfg, None, true).unwrap();
        m.push_artifact("history.csv");
        m.save(dir.path()).unwrap();
        // exactly one manifest per directory
        assert!(m.save(dir.path()).is_err());
        let back = RunManifest::load(dir.path()).unwrap();
        assert_eq!(back.config_sha256, cfg.content_hash().unwrap());
        assert_eq!(back.artifacts, vec!["history.csv"]);
        assert_eq!(back.config().unwrap().toy.image_size, 64);
    }

    #[test]
    fn tampered_manifest_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::toy_desk();
        RunManifest::new("eval", &cfg, Some("abc".into()), false)
            .unwrap()
            .save(dir.path())
            .unwrap();
        let path = RunManifest::path_in(dir.path());
        let text = std::fs::read_to_string(&path)
            .unwrap()
            .replace("\"config_sha256\": \"", "\"config_sha256\": \"0");
        std::fs::write(&path, text).unwrap();
        match RunManifest::load(dir.path()) {
            Err(Error::CheckpointMismatch(_)) => {}
            other => panic!("expected hash mismatch, got {other:?}"),
        }
    }

    #[test]
    fn out_dir_claiming() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        claim_out_dir(&out, false).unwrap();
        std::fs::write(out.join("stale.txt"), "x").unwrap();
        assert!(claim_out_dir(&out, false).is_err());
        claim_out_dir(&out, true).unwrap();
        assert!(!out.join("stale.txt").exists());
    }
}
