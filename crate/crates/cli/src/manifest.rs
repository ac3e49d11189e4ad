//! Run manifest: config hash, input hashes, and per-stage counts.

use std::collections::BTreeMap;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use stereoprobe::util;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub config_hash: String,
    /// Artifact path (relative to the output directory) to SHA-256.
    pub artifacts: BTreeMap<String, String>,
    pub counts: BTreeMap<String, u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl StageRecord {
    pub fn count(&mut self, key: impl Into<String>, value: impl TryInto<u64>) {
        self.counts.insert(key.into(), value.try_into().unwrap_or(u64::MAX));
    }

    pub fn get(&self, key: &str) -> u64 {
        self.counts.get(key).copied().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config_hash: String,
    pub versions: BTreeMap<String, String>,
    pub inputs: BTreeMap<String, String>,
    pub stages: BTreeMap<String, StageRecord>,
}

impl RunManifest {
    pub fn new(config_hash: &str) -> Self {
        let mut versions = BTreeMap::new();
        versions.insert("stereoprobe".to_string(), env!("CARGO_PKG_VERSION").to_string());
        Self {
            run_id: config_hash.chars().take(16).collect(),
            config_hash: config_hash.to_string(),
            versions,
            inputs: BTreeMap::new(),
            stages: BTreeMap::new(),
        }
    }

    pub fn path(out_dir: &Path) -> PathBuf {
        out_dir.join(MANIFEST_FILE)
    }

    pub fn load(out_dir: &Path) -> io::Result<Option<Self>> {
        let path = Self::path(out_dir);
        if !path.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&path)?;
        serde_json::from_str(&text).map(Some).map_err(io::Error::other)
    }

    /// The existing manifest when it belongs to the same config; otherwise
    /// a fresh one, so stale stage records never mix with a new config.
    pub fn open(out_dir: &Path, config_hash: &str) -> io::Result<Self> {
        Ok(match Self::load(out_dir)? {
            Some(m) if m.config_hash == config_hash => m,
            _ => Self::new(config_hash),
        })
    }

    pub fn record_input(&mut self, label: &str, path: &Path) -> io::Result<()> {
        self.inputs.insert(label.to_string(), util::file_sha256(path)?);
        Ok(())
    }

    pub fn save(&self, out_dir: &Path) -> io::Result<()> {
        util::write_json_atomic(&Self::path(out_dir), self)
    }
}
