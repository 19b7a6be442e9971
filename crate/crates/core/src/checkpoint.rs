//! On-disk checkpoints: `model.json` describing the architecture and the
//! parameter table, plus `weights.f32` holding little-endian `f32` values
//! concatenated in table order.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::error::TensorError;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
pub const MODEL_FILE: &str = "model.json";
pub const WEIGHTS_FILE: &str = "weights.f32";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: malformed model.json: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint holds a `{found}` model, expected `{expected}`")]
    Kind { found: String, expected: String },
    #[error("weights.f32 has {found} bytes, table requires {expected}")]
    WeightsLength { found: usize, expected: usize },
    #[error("missing metadata key `{0}`")]
    MissingMetadata(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub kind: String,
    pub seed: u64,
    pub architecture: Value,
    pub params: Vec<ParamEntry>,
    #[serde(default)]
    pub metadata: Map<String, Value>,
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

impl Checkpoint {
    pub fn new(kind: &str, seed: u64, architecture: Value, store: &ParamStore) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            kind: kind.to_string(),
            seed,
            architecture,
            params: store
                .ids()
                .map(|id| ParamEntry {
                    name: store.name(id).to_string(),
                    shape: store.value(id).shape().to_vec(),
                })
                .collect(),
            metadata: Map::new(),
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.metadata.insert(key.to_string(), value.into());
        self
    }

    pub fn meta(&self, key: &str) -> Result<&Value, CheckpointError> {
        self.metadata
            .get(key)
            .ok_or_else(|| CheckpointError::MissingMetadata(key.to_string()))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<(), CheckpointError> {
        if self.kind != kind {
            return Err(CheckpointError::Kind {
                found: self.kind.clone(),
                expected: kind.to_string(),
            });
        }
        Ok(())
    }

    /// Write `model.json` and `weights.f32` into `dir`, creating it.
    pub fn save(&self, dir: &Path, store: &ParamStore) -> Result<(), CheckpointError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let json_path = dir.join(MODEL_FILE);
        let json = serde_json::to_string_pretty(self).map_err(|source| CheckpointError::Json {
            path: json_path.clone(),
            source,
        })?;
        fs::write(&json_path, json + "\n").map_err(io_err(&json_path))?;

        let mut bytes = Vec::with_capacity(store.num_scalars() * 4);
        for id in store.ids() {
            for &v in store.value(id).data() {
                bytes.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let w_path = dir.join(WEIGHTS_FILE);
        fs::write(&w_path, bytes).map_err(io_err(&w_path))?;
        Ok(())
    }

    /// Read a checkpoint back; values come back as the `f32` that was stored.
    pub fn load(dir: &Path) -> Result<(Self, ParamStore), CheckpointError> {
        let json_path = dir.join(MODEL_FILE);
        let text = fs::read_to_string(&json_path).map_err(io_err(&json_path))?;
        let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|source| CheckpointError::Json {
            path: json_path.clone(),
            source,
        })?;
        if ckpt.format_version != FORMAT_VERSION {
            return Err(CheckpointError::Version {
                found: ckpt.format_version,
                expected: FORMAT_VERSION,
            });
        }
        let w_path = dir.join(WEIGHTS_FILE);
        let bytes = fs::read(&w_path).map_err(io_err(&w_path))?;
        let expected: usize = ckpt.params.iter().map(|p| p.shape.iter().product::<usize>() * 4).sum();
        if bytes.len() != expected {
            return Err(CheckpointError::WeightsLength {
                found: bytes.len(),
                expected,
            });
        }
        let mut store = ParamStore::new();
        let mut floats = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
        for entry in &ckpt.params {
            let n: usize = entry.shape.iter().product();
            let data: Vec<f64> = floats.by_ref().take(n).collect();
            store.add(entry.name.clone(), Tensor::new(&entry.shape, data)?)?;
        }
        Ok((ckpt, store))
    }
}
