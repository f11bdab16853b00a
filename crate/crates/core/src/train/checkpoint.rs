//! Binary checkpoint layout:
//!
//! ```text
//! "HMPA" | version: u32 LE | meta_len: u64 LE | meta: UTF-8 JSON | arrays: f64 LE ...
//! ```
//!
//! The JSON block carries both configs, the step, the shuffle RNG state, the
//! vocabulary and a manifest of `{name, shape, offset}` for every array, where
//! offsets count bytes from the start of the array section. Arrays are stored
//! in lexicographic name order: `adam.m/*`, `adam.v/*`, then `param/*`.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AdamState, TrainConfig, TrainError};
use crate::fsutil;
use crate::model::ModelConfig;
use crate::tensor::{ParameterSet, Tensor};

pub const MAGIC: &[u8; 4] = b"HMPA";
pub const CHECKPOINT_VERSION: u32 = 1;
const SUPPORTED: [u32; 1] = [CHECKPOINT_VERSION];

/// Resumable position of a ChaCha stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// Decimal string: JSON numbers cannot hold a u128 exactly.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng, TrainError> {
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| TrainError::Corrupt(format!("bad rng word position {:?}", self.word_pos)))?;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub step: u64,
    pub params: ParameterSet,
    pub adam: AdamState,
    pub rng: RngState,
    pub vocab: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    model: ModelConfig,
    train: TrainConfig,
    step: u64,
    rng: RngState,
    vocab: Vec<String>,
    arrays: Vec<ArrayEntry>,
}

impl Checkpoint {
    fn arrays(&self) -> BTreeMap<String, (Vec<usize>, &[f64])> {
        let mut out = BTreeMap::new();
        for (name, t) in self.params.iter() {
            out.insert(format!("param/{name}"), (t.shape().to_vec(), t.data()));
            if let (Some(m), Some(v)) = (self.adam.m.get(name), self.adam.v.get(name)) {
                out.insert(format!("adam.m/{name}"), (t.shape().to_vec(), m.as_slice()));
                out.insert(format!("adam.v/{name}"), (t.shape().to_vec(), v.as_slice()));
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let arrays = self.arrays();
        let mut offset = 0u64;
        let mut manifest = Vec::with_capacity(arrays.len());
        for (name, (shape, data)) in &arrays {
            manifest.push(ArrayEntry {
                name: name.clone(),
                shape: shape.clone(),
                offset,
            });
            offset += 8 * data.len() as u64;
        }
        let meta = Meta {
            model: self.model.clone(),
            train: self.train.clone(),
            step: self.step,
            rng: self.rng.clone(),
            vocab: self.vocab.clone(),
            arrays: manifest,
        };
        let json = serde_json::to_vec(&meta).expect("checkpoint metadata serializes");
        let mut out = Vec::with_capacity(16 + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, data) in arrays.values() {
            for v in *data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TrainError> {
        let corrupt = |m: &str| TrainError::Corrupt(m.to_string());
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(corrupt("missing HMPA magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if !SUPPORTED.contains(&version) {
            return Err(TrainError::Version {
                found: version,
                supported: SUPPORTED.to_vec(),
            });
        }
        let meta_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let data_start = 16usize
            .checked_add(meta_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| corrupt("metadata block truncated"))?;
        let meta: Meta = serde_json::from_slice(&bytes[16..data_start])
            .map_err(|e| TrainError::Corrupt(format!("metadata: {e}")))?;
        let data = &bytes[data_start..];

        let mut expected = 0u64;
        let mut arrays: BTreeMap<String, Tensor> = BTreeMap::new();
        for entry in &meta.arrays {
            let n: usize = entry.shape.iter().product();
            if entry.offset != expected {
                return Err(TrainError::Corrupt(format!(
                    "array {} has offset {} (expected {expected})",
                    entry.name, entry.offset
                )));
            }
            let end = expected as usize + 8 * n;
            if end > data.len() {
                return Err(corrupt("array data truncated"));
            }
            let values = data[expected as usize..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(entry.shape.clone(), values).map_err(|e| TrainError::Corrupt(e.to_string()))?;
            arrays.insert(entry.name.clone(), t);
            expected = end as u64;
        }
        if expected as usize != data.len() {
            return Err(TrainError::Corrupt(format!(
                "{} trailing bytes after the last array",
                data.len() - expected as usize
            )));
        }

        let mut params = ParameterSet::new();
        let mut adam = AdamState::default();
        for (name, t) in arrays {
            if let Some(p) = name.strip_prefix("param/") {
                params.insert(p, t)?;
            } else if let Some(p) = name.strip_prefix("adam.m/") {
                adam.m.insert(p.to_string(), t.into_data());
            } else if let Some(p) = name.strip_prefix("adam.v/") {
                adam.v.insert(p.to_string(), t.into_data());
            } else {
                return Err(TrainError::Corrupt(format!("unknown array {name}")));
            }
        }
        Ok(Self {
            model: meta.model,
            train: meta.train,
            step: meta.step,
            params,
            adam,
            rng: meta.rng,
            vocab: meta.vocab,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<(), TrainError> {
    let path = path.as_ref();
    fsutil::write_atomic(path, &ckpt.to_bytes()).map_err(|source| TrainError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, TrainError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| TrainError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Checkpoint::from_bytes(&bytes)
}
