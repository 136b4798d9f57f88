//! Binary checkpoints: a magic tag, a format version, a JSON header, then
//! every tensor as little-endian f64 (parameters, then Adam's first and
//! second moments, all in parameter order). See `docs/checkpoint-format.md`.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adam::{Adam, AdamConfig};
use super::trainer::{TrainConfig, TrainState, Trainer};
use crate::autodiff::Tensor;
use crate::backbone::{Model, ModelConfig};
use crate::data::Split;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"HYMOECKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    train: TrainConfig,
    state: TrainState,
    adam: AdamConfig,
    adam_t: u64,
    tensors: Vec<TensorEntry>,
}

/// Everything needed to rebuild a trainer at the exact step it was saved.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub state: TrainState,
    pub optimizer: Adam,
    pub params: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_trainer(trainer: &Trainer) -> Self {
        Self {
            model_config: trainer.model.config.clone(),
            train_config: trainer.config.clone(),
            state: trainer.state.clone(),
            optimizer: trainer.optimizer.clone(),
            params: trainer
                .model
                .params
                .iter()
                .map(|p| (p.name.clone(), p.value.clone()))
                .collect(),
        }
    }

    /// Builds the model from the stored config and overwrites its parameters.
    pub fn model(&self) -> Result<Model> {
        let mut model = Model::new(self.model_config.clone(), self.train_config.seed)?;
        self.restore_into(&mut model)?;
        Ok(model)
    }

    /// Copies stored values into `model`; names and shapes must match.
    pub fn restore_into(&self, model: &mut Model) -> Result<()> {
        if model.params.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model has {}",
                self.params.len(),
                model.params.len()
            )));
        }
        for (p, (name, value)) in model.params.iter_mut().zip(&self.params) {
            if &p.name != name || p.value.shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} {:?} does not match model parameter {} {:?}",
                    value.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
            p.value = value.clone();
        }
        Ok(())
    }

    pub fn into_trainer(self, split: &Split) -> Result<Trainer> {
        let model = self.model()?;
        Trainer::resume(model, self.optimizer, self.state, self.train_config, split)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            model: self.model_config.clone(),
            train: self.train_config.clone(),
            state: self.state.clone(),
            adam: self.optimizer.config,
            adam_t: self.optimizer.t,
            tensors: self
                .params
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let n: usize = self.params.iter().map(|(_, t)| t.numel()).sum();
        let mut out = Vec::with_capacity(20 + json.len() + 24 * n);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let tensors = self
            .params
            .iter()
            .map(|(_, t)| t)
            .chain(&self.optimizer.m)
            .chain(&self.optimizer.v);
        for t in tensors {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version} is not supported (expected {CHECKPOINT_VERSION})"
            )));
        }
        let len = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
        let len = usize::try_from(len).map_err(|_| Error::Checkpoint("header length overflow".into()))?;
        let header: Header =
            serde_json::from_slice(r.take(len)?).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        header.model.validate()?;
        let read_all = |r: &mut Reader| -> Result<Vec<Tensor>> {
            header
                .tensors
                .iter()
                .map(|e| {
                    let n = e.shape.iter().product::<usize>();
                    let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("tensor size overflow".into()))?)?;
                    let data = raw
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    Tensor::new(e.shape.clone(), data)
                })
                .collect()
        };
        let values = read_all(&mut r)?;
        let m = read_all(&mut r)?;
        let v = read_all(&mut r)?;
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after the payload",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            model_config: header.model,
            train_config: header.train,
            state: header.state,
            optimizer: Adam {
                config: header.adam,
                t: header.adam_t,
                m,
                v,
            },
            params: header.tensors.into_iter().map(|e| e.name).zip(values).collect(),
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!(
                "truncated: needed {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
}

/// Writes atomically: a sibling temp file is renamed over `path`.
pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    let bytes = checkpoint.to_bytes()?;
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes).map_err(|e| match e {
        Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
        other => other,
    })
}
