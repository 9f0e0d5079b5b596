//! Binary checkpoint files.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, JSON
//! header, little-endian tensor payload (parameters, then Adam first and
//! second moments), and a CRC-32 of everything before it.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::BroadcastModel;
use crate::params::ParameterStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::trainer::{create_file, EpochMetrics, TrainConfig};

const MAGIC: &[u8; 8] = b"DBCKPT\r\n";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

/// Trained parameters plus what is needed to rebuild the model and resume.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T: Scalar> {
    pub train: TrainConfig,
    /// Epochs completed.
    pub epoch: usize,
    pub metrics: Vec<EpochMetrics>,
    pub store: ParameterStore<T>,
    pub optimizer: Option<OptimizerState<T>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    dtype: String,
    train: TrainConfig,
    epoch: usize,
    metrics: Vec<EpochMetrics>,
    tensors: Vec<TensorEntry>,
    optimizer_step: Option<u64>,
}

fn width(dtype: &str) -> Result<usize> {
    match dtype {
        "f32" => Ok(4),
        "f64" => Ok(8),
        other => Err(Error::Checkpoint(format!("unsupported dtype `{other}`"))),
    }
}

fn encode<T: Scalar>(out: &mut Vec<u8>, values: &[T]) {
    if T::NAME == "f32" {
        for v in values {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    } else {
        for v in values {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
}

fn decode<T: Scalar>(bytes: &[u8], dtype: &str) -> Vec<T> {
    if dtype == "f32" {
        bytes
            .chunks_exact(4)
            .map(|b| T::lit(f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64))
            .collect()
    } else {
        bytes
            .chunks_exact(8)
            .map(|b| T::lit(f64::from_le_bytes(b.try_into().expect("8 bytes"))))
            .collect()
    }
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            dtype: T::NAME.to_string(),
            train: self.train.clone(),
            epoch: self.epoch,
            metrics: self.metrics.clone(),
            tensors: self
                .store
                .iter()
                .map(|(_, name, t)| TensorEntry {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            optimizer_step: self.optimizer.as_ref().map(|o| o.step),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(json.len() + 24 + self.store.num_scalars() * 3 * width(T::NAME).unwrap_or(8));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, _, t) in self.store.iter() {
            encode(&mut out, t.data());
        }
        if let Some(o) = &self.optimizer {
            for m in o.m.iter().chain(&o.v) {
                encode(&mut out, m);
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        if bytes.len() < MAGIC.len() + 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(bad("CRC mismatch; file is corrupted or truncated"));
        }
        let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let hlen = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
        let json = body.get(20..20 + hlen).ok_or_else(|| bad("header length exceeds file"))?;
        let header: Header =
            serde_json::from_slice(json).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let w = width(&header.dtype)?;
        let mut payload = &body[20 + hlen..];
        let mut take = |n: usize| -> Result<Vec<T>> {
            if payload.len() < n * w {
                return Err(bad("payload shorter than the tensor index"));
            }
            let (head, rest) = payload.split_at(n * w);
            payload = rest;
            Ok(decode(head, &header.dtype))
        };
        let mut store = ParameterStore::new();
        for e in &header.tensors {
            let n = e.shape.iter().product();
            store.insert(&e.name, Tensor::from_vec(&e.shape, take(n)?)?)?;
        }
        let optimizer = match header.optimizer_step {
            Some(step) => {
                let sizes: Vec<usize> = header.tensors.iter().map(|e| e.shape.iter().product()).collect();
                let m = sizes.iter().map(|&n| take(n)).collect::<Result<_>>()?;
                let v = sizes.iter().map(|&n| take(n)).collect::<Result<_>>()?;
                Some(OptimizerState { step, m, v })
            }
            None => None,
        };
        if !payload.is_empty() {
            return Err(bad("trailing bytes after payload"));
        }
        Ok(Checkpoint {
            train: header.train,
            epoch: header.epoch,
            metrics: header.metrics,
            store,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("ckpt.tmp");
        let mut f = create_file(&tmp)?;
        f.write_all(&self.to_bytes())?;
        f.sync_all()?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Rebuilds the architecture and checks the stored parameters fit it.
    pub fn model(&self) -> Result<BroadcastModel> {
        let (model, fresh) = BroadcastModel::build::<T>(self.train.variant, &self.train.model, self.train.seed)?;
        if fresh.len() != self.store.len() {
            return Err(Error::Checkpoint(format!(
                "architecture has {} parameters, checkpoint {}",
                fresh.len(),
                self.store.len()
            )));
        }
        for ((_, a, ta), (_, b, tb)) in fresh.iter().zip(self.store.iter()) {
            if a != b || ta.shape() != tb.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter mismatch: expected {a} {:?}, found {b} {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
        }
        Ok(model)
    }
}
