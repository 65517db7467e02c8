use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub status: StageStatus,
    pub config_hash: String,
    /// Artifact name to path, relative to the epoch directory.
    #[serde(default)]
    pub artifacts: BTreeMap<String, PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cause: Option<String>,
}

/// Stage records of one config hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Epoch {
    pub index: usize,
    pub config_hash: String,
    pub seed: u64,
    /// Directory (relative to the output dir) holding this epoch's artifacts.
    pub dir: PathBuf,
    #[serde(default)]
    pub stages: BTreeMap<String, StageRecord>,
}

/// Append-only record of every run made in one output directory.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunManifest {
    pub epochs: Vec<Epoch>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl RunManifest {
    pub fn load_or_default(output_dir: &Path) -> Result<Self> {
        let path = output_dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(Self::default());
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format("manifest", e.to_string()))
    }

    pub fn save(&self, output_dir: &Path) -> Result<()> {
        let path = output_dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::format("manifest", e.to_string()))?;
        let tmp = output_dir.join(format!("{MANIFEST_FILE}.tmp"));
        std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }

    /// Index of the epoch for `hash`, opening a new one when none exists.
    pub fn epoch_for(&mut self, hash: &str, seed: u64) -> usize {
        if let Some(i) = self.epochs.iter().position(|e| e.config_hash == hash) {
            return i;
        }
        let index = self.epochs.len();
        self.epochs.push(Epoch {
            index,
            config_hash: hash.to_string(),
            seed,
            dir: PathBuf::from(format!("epoch-{index:03}-{}", &hash[..12.min(hash.len())])),
            stages: BTreeMap::new(),
        });
        index
    }
}

impl Epoch {
    /// The stage's artifacts when it completed under this epoch's hash and
    /// every artifact is still on disk.
    pub fn completed(&self, stage: &str, root: &Path) -> Option<&BTreeMap<String, PathBuf>> {
        let rec = self.stages.get(stage)?;
        let ok = rec.status == StageStatus::Completed
            && rec.config_hash == self.config_hash
            && rec.artifacts.values().all(|p| root.join(&self.dir).join(p).exists());
        ok.then_some(&rec.artifacts)
    }
}
