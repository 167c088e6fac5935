//! Run configuration: one JSON file with per-module sections, dot-path
//! overrides, and a content hash for provenance headers.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::embedder::NetConfig;
use crate::error::{Error, Result};
use crate::gradcheck::GradcheckConfig;
use crate::inference::ProtocolSpec;
use crate::losses::LossConfig;
use crate::sim::WorldConfig;
use crate::trainer::TrainConfig;

/// File locations. Relative paths resolve against the config file's
/// directory. Not part of the config hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub dataset: PathBuf,
    pub checkpoint: PathBuf,
    pub bank: PathBuf,
    pub log: PathBuf,
    /// Stem; the protocol name and `.json` are appended.
    pub detections: PathBuf,
    /// Stem; the protocol name and `.csv` / `.json` are appended.
    pub report: PathBuf,
    /// When set, `train` and `eval` refuse datasets with another digest.
    pub expected_dataset_digest: Option<String>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            dataset: "dataset.json".into(),
            checkpoint: "checkpoint.json".into(),
            bank: "bank.json".into(),
            log: "train_log.jsonl".into(),
            detections: "detections".into(),
            report: "report".into(),
            expected_dataset_digest: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub world: WorldConfig,
    pub model: NetConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub protocol: ProtocolSpec,
    pub gradcheck: GradcheckConfig,
    pub paths: PathsConfig,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Parses `v` as JSON, falling back to a bare string.
fn parse_override_value(v: &str) -> Value {
    serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()))
}

/// Applies `a.b.c=value` to a fully populated config tree. The path must
/// already exist, so typos are rejected rather than silently added.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override {assignment:?} is not key=value")))?;
    let mut node = root;
    for key in path.split('.') {
        node = node
            .as_object_mut()
            .and_then(|m| m.get_mut(key))
            .ok_or_else(|| Error::config(format!("unknown config key {path:?}")))?;
    }
    *node = parse_override_value(raw);
    Ok(())
}

impl RunConfig {
    pub fn from_value(v: Value, overrides: &[String]) -> Result<Self> {
        let parsed: RunConfig =
            serde_json::from_value(v).map_err(|e| Error::config(e.to_string()))?;
        if overrides.is_empty() {
            parsed.validate()?;
            return Ok(parsed);
        }
        let mut full = serde_json::to_value(&parsed)?;
        for o in overrides {
            apply_override(&mut full, o)?;
        }
        let cfg: RunConfig =
            serde_json::from_value(full).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json(text: &str, overrides: &[String]) -> Result<Self> {
        let v: Value = serde_json::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        Self::from_value(v, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        if self.model.input_dim != self.world.feature_dim {
            return Err(Error::config(format!(
                "model.input_dim {} differs from world.feature_dim {}",
                self.model.input_dim, self.world.feature_dim
            )));
        }
        if self.train.shots > self.world.shots {
            return Err(Error::config(format!(
                "train.shots {} exceeds world.shots {}",
                self.train.shots, self.world.shots
            )));
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON of every section except `paths`.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(m) = v.as_object_mut() {
            m.remove("paths");
        }
        sha256_hex(v.to_string().as_bytes())
    }
}

/// A config loaded from disk together with the directory its relative
/// paths refer to.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub base_dir: PathBuf,
    pub hash: String,
}

impl LoadedConfig {
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config = RunConfig::from_json(&text, overrides)?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self::new(config, base_dir))
    }

    pub fn new(config: RunConfig, base_dir: PathBuf) -> Self {
        let hash = config.hash();
        LoadedConfig {
            config,
            base_dir,
            hash,
        }
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }
}
