use std::fs;
use std::path::Path;

use circuits_core::bifurcation::BifurcationConfig;
use circuits_core::data::load_jsonl;
use circuits_core::model::ModelConfig;
use circuits_core::train::TrainConfig;
use circuits_core::CoreError;
use serde::{Deserialize, Serialize};

use crate::{io_err, CliError, Result};

/// Everything a run needs; file values are overridden by flags.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: BifurcationConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Train/val/test ratios for gen-data.
    pub splits: [usize; 3],
    #[serde(skip)]
    pub model_channels_explicit: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: BifurcationConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            splits: [70, 10, 20],
            model_channels_explicit: false,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let explicit = value.pointer("/model/channels").is_some();
        let mut cfg: RunConfig = serde_json::from_value(value)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        cfg.model_channels_explicit = explicit;
        Ok(cfg)
    }

    /// Merged configuration as echoed into output artifacts.
    pub fn effective_json(&self) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(self).map_err(CoreError::from)?)
    }
}

/// Dataset description written next to the split files.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub kind: String,
    pub channels: usize,
    pub counts: [usize; 3],
    pub config_digest: String,
    /// Generator settings of synthetic data; enables the oracle in eval.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bifurcation: Option<BifurcationConfig>,
}

impl Manifest {
    /// Reads `manifest.json`; for externally prepared data without one the
    /// channel count is taken from the first record found in a split file.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        if path.exists() {
            let text = fs::read_to_string(&path).map_err(io_err(&path))?;
            return serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())));
        }
        let mut counts = [0; 3];
        let mut channels = None;
        for (slot, name) in ["train.jsonl", "val.jsonl", "test.jsonl"].iter().enumerate() {
            let file = dir.join(name);
            if file.exists() {
                let part = load_jsonl(&file)?;
                counts[slot] = part.len();
                channels = channels.or(part.first().map(|i| i.channels));
            }
        }
        let channels = channels
            .ok_or_else(|| CliError::Config(format!("{}: no manifest and no records", dir.display())))?;
        Ok(Self {
            kind: "external".into(),
            channels,
            counts,
            config_digest: String::new(),
            bifurcation: None,
        })
    }
}
