//! Self-describing binary checkpoint: magic, version, JSON header, raw
//! little-endian `f64` payloads.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use circuits_autodiff::Tensor;
use serde::{Deserialize, Serialize};

use crate::data::ChannelStats;
use crate::error::{CoreError, Result};
use crate::model::{Model, ModelConfig};
use crate::train::TrainConfig;

pub const MAGIC: &[u8; 8] = b"CIRCUITS";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub stats: Option<ChannelStats>,
    /// Absent when no finite validation loss was recorded.
    pub best_val_njnll: Option<f64>,
    pub epoch: usize,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub train: TrainConfig,
    pub stats: Option<ChannelStats>,
    pub best_val_njnll: f64,
    pub epoch: usize,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = CheckpointHeader {
            model: self.model.cfg.clone(),
            train: self.train.clone(),
            stats: self.stats.clone(),
            best_val_njnll: self.best_val_njnll.is_finite().then_some(self.best_val_njnll),
            epoch: self.epoch,
            tensors: self
                .model
                .params
                .names()
                .iter()
                .zip(self.model.params.tensors())
                .map(|(n, t)| TensorEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + json.len() + 8 * self.model.params.num_scalars());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.model.params.tensors() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| CoreError::Checkpoint(m.to_string());
        let mut magic = [0u8; 8];
        bytes.read_exact(&mut magic).map_err(|_| bad("truncated magic"))?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let mut u32b = [0u8; 4];
        bytes.read_exact(&mut u32b).map_err(|_| bad("truncated version"))?;
        let version = u32::from_le_bytes(u32b);
        if version != FORMAT_VERSION {
            return Err(CoreError::Checkpoint(format!("unsupported format version {version}")));
        }
        let mut u64b = [0u8; 8];
        bytes.read_exact(&mut u64b).map_err(|_| bad("truncated header length"))?;
        let len = usize::try_from(u64::from_le_bytes(u64b)).map_err(|_| bad("header too large"))?;
        if len > bytes.len() {
            return Err(bad("truncated header"));
        }
        let (json, mut payload) = bytes.split_at(len);
        let header: CheckpointHeader = serde_json::from_slice(json)?;
        let mut names = Vec::with_capacity(header.tensors.len());
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in &header.tensors {
            let n: usize = entry.shape.iter().product();
            if payload.len() < 8 * n {
                return Err(CoreError::Checkpoint(format!("payload of {} truncated", entry.name)));
            }
            let (chunk, rest) = payload.split_at(8 * n);
            payload = rest;
            let data = chunk
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
                .collect();
            names.push(entry.name.clone());
            tensors.push(Tensor::new(entry.shape.clone(), data)?);
        }
        if !payload.is_empty() {
            return Err(bad("trailing bytes after payload"));
        }
        Ok(Self {
            model: Model::with_params(header.model, &names, tensors)?,
            train: header.train,
            stats: header.stats,
            best_val_njnll: header.best_val_njnll.unwrap_or(f64::NAN),
            epoch: header.epoch,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path).map_err(|e| CoreError::io(path, e))?;
        f.write_all(&bytes).map_err(|e| CoreError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| CoreError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
