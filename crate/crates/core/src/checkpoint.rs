//! Binary checkpoints.
//!
//! ```text
//! "SKKT" | version: u32 LE | header_len: u64 LE | header (JSON)
//!        | tensor payload (little-endian, header order) | CRC-32 of everything before it
//! ```
//!
//! The payload holds the model parameters followed, when present, by the
//! Adam first and second moments in the same order.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{KtModel, ModelConfig};
use crate::optim::{AdamConfig, AdamState};
use crate::tensor::{Real, Tensor};

const MAGIC: &[u8; 4] = b"SKKT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct AdamHeader {
    config: AdamConfig,
    t: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    dtype: String,
    model: ModelConfig,
    epoch: usize,
    skill_vocab: Vec<String>,
    run_config: serde_json::Value,
    tensors: Vec<TensorEntry>,
    adam: Option<AdamHeader>,
}

/// Everything needed to resume or evaluate a run.
#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub model: KtModel<T>,
    pub adam: Option<AdamState<T>>,
    pub epoch: usize,
    /// Raw skill labels in id order, so evaluation data maps to the same ids.
    pub skill_vocab: Vec<String>,
    /// Resolved configuration of the run that wrote this checkpoint.
    pub run_config: serde_json::Value,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn put<T: Real>(buf: &mut Vec<u8>, tensor: &Tensor<T>) {
    for &v in tensor.data() {
        match T::DTYPE {
            "f32" => buf.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes()),
            _ => buf.extend_from_slice(&v.to_f64_lossy().to_le_bytes()),
        }
    }
}

impl<T: Real> Checkpoint<T> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let params = self.model.params();
        let header = Header {
            dtype: T::DTYPE.to_string(),
            model: self.model.config().clone(),
            epoch: self.epoch,
            skill_vocab: self.skill_vocab.clone(),
            run_config: self.run_config.clone(),
            tensors: params
                .names()
                .iter()
                .zip(params.tensors())
                .map(|(name, t)| TensorEntry { name: name.clone(), shape: t.shape().to_vec() })
                .collect(),
            adam: self.adam.as_ref().map(|a| AdamHeader { config: a.config, t: a.t }),
        };
        let header = serde_json::to_vec(&header)?;
        let mut buf = Vec::with_capacity(16 + header.len() + params.scalar_count() * 3 * std::mem::size_of::<T>());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
        buf.extend_from_slice(&header);
        for t in params.tensors() {
            put(&mut buf, t);
        }
        if let Some(adam) = &self.adam {
            for t in adam.m.iter().chain(&adam.v) {
                put(&mut buf, t);
            }
        }
        let sum = crc32fast::hash(&buf);
        buf.extend_from_slice(&sum.to_le_bytes());
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..4] != MAGIC {
            return Err(corrupt("not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(corrupt(format!("unsupported format version {version}, expected {FORMAT_VERSION}")));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().unwrap()) {
            return Err(corrupt("checksum mismatch, file is truncated or corrupted"));
        }
        let header_len = u64::from_le_bytes(body[8..16].try_into().unwrap()) as usize;
        let header_end = 16usize
            .checked_add(header_len)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| corrupt("header length exceeds file size"))?;
        let header: Header =
            serde_json::from_slice(&body[16..header_end]).map_err(|e| corrupt(format!("bad header: {e}")))?;
        if header.dtype != T::DTYPE {
            return Err(corrupt(format!("checkpoint holds {} values, expected {}", header.dtype, T::DTYPE)));
        }

        let width = std::mem::size_of::<T>();
        let mut payload = &body[header_end..];
        let mut take = |shape: &[usize]| -> Result<Tensor<T>> {
            let n: usize = shape.iter().product();
            if payload.len() < n * width {
                return Err(corrupt("payload shorter than the tensor index"));
            }
            let (chunk, rest) = payload.split_at(n * width);
            payload = rest;
            let data = chunk
                .chunks_exact(width)
                .map(|c| match width {
                    4 => T::from_f32(f32::from_le_bytes(c.try_into().unwrap())).unwrap(),
                    _ => T::from_f64_lossy(f64::from_le_bytes(c.try_into().unwrap())),
                })
                .collect();
            Tensor::new(shape, data).map_err(|e| corrupt(format!("bad tensor shape: {e}")))
        };

        let mut named = Vec::with_capacity(header.tensors.len());
        for entry in &header.tensors {
            named.push((entry.name.clone(), take(&entry.shape)?));
        }
        let adam = match &header.adam {
            None => None,
            Some(a) => {
                let m = header.tensors.iter().map(|e| take(&e.shape)).collect::<Result<Vec<_>>>()?;
                let v = header.tensors.iter().map(|e| take(&e.shape)).collect::<Result<Vec<_>>>()?;
                Some(AdamState { config: a.config, m, v, t: a.t })
            }
        };
        if !payload.is_empty() {
            return Err(corrupt(format!("{} unexpected trailing bytes", payload.len())));
        }
        let model = KtModel::from_named_tensors(&header.model, named)?;
        Ok(Checkpoint {
            model,
            adam,
            epoch: header.epoch,
            skill_vocab: header.skill_vocab,
            run_config: header.run_config,
        })
    }

    /// Writes via a temporary sibling and a rename, so an interrupted save
    /// never clobbers the previous checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = std::path::PathBuf::from(tmp);
        let mut file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        file.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        file.sync_all().map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
