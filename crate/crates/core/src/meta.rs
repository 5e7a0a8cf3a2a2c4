//! `run.meta`: one JSON file per artifact-producing run, recording the
//! resolved configuration (with each key's source), the seed, and SHA-256
//! hashes of every produced artifact. Timestamps live only here, so all
//! other outputs stay byte-reproducible.

use crate::config::ConfigMap;
use crate::error::Result;
use serde::Serialize;
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Serialize)]
struct ConfigEntry {
    value: String,
    source: &'static str,
}

#[derive(Serialize)]
struct RunMeta {
    subcommand: String,
    seed: u64,
    /// Resolution order is default < file < flag; the recorded source is
    /// where each final value came from.
    config: BTreeMap<String, ConfigEntry>,
    artifacts: BTreeMap<String, String>,
    created_unix: u64,
}

pub struct RunMetaBuilder {
    subcommand: String,
    seed: u64,
    config: BTreeMap<String, ConfigEntry>,
    artifacts: BTreeMap<String, String>,
}

impl RunMetaBuilder {
    pub fn new(subcommand: &str, seed: u64) -> Self {
        RunMetaBuilder {
            subcommand: subcommand.to_string(),
            seed,
            config: BTreeMap::new(),
            artifacts: BTreeMap::new(),
        }
    }

    pub fn with_config(mut self, cfg: &ConfigMap) -> Self {
        for (k, v, s) in cfg.entries() {
            self.config.insert(
                k.to_string(),
                ConfigEntry {
                    value: v.to_string(),
                    source: s.name(),
                },
            );
        }
        self
    }

    pub fn with_setting(mut self, key: &str, value: impl ToString) -> Self {
        self.config.insert(
            key.to_string(),
            ConfigEntry {
                value: value.to_string(),
                source: "flag",
            },
        );
        self
    }

    /// Hash an artifact file (path stored relative to the run directory).
    pub fn add_artifact(&mut self, run_dir: &Path, file: &Path) -> Result<()> {
        use sha2::{Digest, Sha256};
        let bytes = std::fs::read(file)?;
        let digest = Sha256::digest(&bytes);
        let rel = file.strip_prefix(run_dir).unwrap_or(file);
        self.artifacts
            .insert(rel.display().to_string(), format!("{digest:x}"));
        Ok(())
    }

    /// Write `run.meta` into the run directory.
    pub fn write(self, run_dir: &Path) -> Result<()> {
        let meta = RunMeta {
            subcommand: self.subcommand,
            seed: self.seed,
            config: self.config,
            artifacts: self.artifacts,
            created_unix: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        };
        let json = serde_json::to_string_pretty(&meta)
            .map_err(|e| crate::CapError::InvalidArgument(format!("meta serialization: {e}")))?;
        std::fs::write(run_dir.join("run.meta"), json)?;
        Ok(())
    }
}
