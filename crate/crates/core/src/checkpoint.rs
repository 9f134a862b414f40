//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "GCAP"                      magic
//! u32                         format version
//! [u8; 32]                    SHA-256 of the model configuration JSON
//! u32, bytes                  metadata JSON (model and data configuration)
//! u64                         epochs completed
//! u64                         optimiser steps taken
//! u64                         payload length in bytes
//! payload:
//!   u32                       tensor count
//!   per tensor:
//!     u32, bytes              UTF-8 name
//!     u32                     rank
//!     u32 * rank              dimensions
//!     f32 * numel             values
//! [u8; 32]                    SHA-256 of the payload
//! ```
//!
//! Tensor names are the parameter-store names; optimiser moments are stored
//! as `adam.m/<name>` and `adam.v/<name>`, standardisation statistics as
//! `data.<branch>.mean` and `data.<branch>.std`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::DataConfig;
use crate::data::{ChannelStats, Moments};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;
use crate::train::{AdamState, Trainer};

pub const MAGIC: &[u8; 4] = b"GCAP";
pub const FORMAT_VERSION: u32 = 1;

/// SHA-256 of the canonical JSON encoding of a model configuration.
pub fn config_digest(config: &ModelConfig) -> [u8; 32] {
    let bytes = serde_json::to_vec(config).expect("model config serialises");
    Sha256::digest(bytes).into()
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Metadata {
    model: ModelConfig,
    data: DataConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    /// Data source the model was trained on.
    pub data: DataConfig,
    pub epoch: u64,
    pub adam_step: u64,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";

fn stats_tensors(stats: &ChannelStats) -> Vec<(String, Tensor<f32>)> {
    let mut out = Vec::new();
    for (branch, m) in [("ground", &stats.ground), ("satellite", &stats.satellite)] {
        out.push((format!("data.{branch}.mean"), Tensor::new(&[3], m.mean.to_vec()).expect("3 values")));
        out.push((format!("data.{branch}.std"), Tensor::new(&[3], m.std.to_vec()).expect("3 values")));
    }
    out
}

impl Checkpoint {
    /// Snapshot of a model, with optimiser state when `adam` is given.
    pub fn capture(
        model: &Model<f32>,
        adam: Option<&AdamState<f32>>,
        epoch: u64,
        data: &DataConfig,
        stats: &ChannelStats,
    ) -> Self {
        let store = &model.store;
        let mut tensors: Vec<(String, Tensor<f32>)> =
            store.ids().map(|id| (store.name(id).to_string(), store.get(id).clone())).collect();
        let mut adam_step = 0;
        if let Some(a) = adam {
            adam_step = a.step;
            for (slot, &id) in a.ids().iter().enumerate() {
                tensors.push((format!("{ADAM_M}{}", store.name(id)), a.m[slot].clone()));
            }
            for (slot, &id) in a.ids().iter().enumerate() {
                tensors.push((format!("{ADAM_V}{}", store.name(id)), a.v[slot].clone()));
            }
        }
        tensors.extend(stats_tensors(stats));
        Checkpoint {
            model: model.config().clone(),
            data: data.clone(),
            epoch,
            adam_step,
            tensors,
        }
    }

    pub fn from_trainer(trainer: &Trainer<f32>, data: &DataConfig, stats: &ChannelStats) -> Self {
        Self::capture(&trainer.model, Some(&trainer.adam), trainer.epoch as u64, data, stats)
    }

    pub fn digest(&self) -> [u8; 32] {
        config_digest(&self.model)
    }

    /// Refuse to pair this checkpoint with a different model configuration.
    pub fn check_config(&self, expected: &ModelConfig) -> Result<()> {
        let (have, want) = (self.digest(), config_digest(expected));
        if have != want {
            return Err(Error::DigestMismatch(format!(
                "checkpoint was written for model config {} but the run config describes {}; \
                 the model sections differ",
                &hex(&have)[..16],
                &hex(&want)[..16]
            )));
        }
        Ok(())
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    fn required(&self, name: &str) -> Result<&Tensor<f32>> {
        self.tensor(name)
            .ok_or_else(|| Error::CorruptCheckpoint(format!("missing tensor {name:?}")))
    }

    pub fn stats(&self) -> Result<ChannelStats> {
        let moments = |branch: &str| -> Result<Moments> {
            let get = |what: &str| -> Result<[f32; 3]> {
                let t = self.required(&format!("data.{branch}.{what}"))?;
                t.data()
                    .try_into()
                    .map_err(|_| Error::CorruptCheckpoint(format!("data.{branch}.{what} must hold 3 values")))
            };
            Ok(Moments {
                mean: get("mean")?,
                std: get("std")?,
            })
        };
        Ok(ChannelStats {
            ground: moments("ground")?,
            satellite: moments("satellite")?,
        })
    }

    /// A model with every stored tensor loaded by name.
    pub fn restore_model(&self) -> Result<Model<f32>> {
        let mut model = Model::new(&self.model)?;
        let ids: Vec<_> = model.store.ids().collect();
        for id in ids {
            let name = model.store.name(id).to_string();
            let t = self.required(&name)?.clone();
            model
                .store
                .set(id, t)
                .map_err(|e| Error::CorruptCheckpoint(format!("tensor {name:?}: {e}")))?;
        }
        let expected = model.store.len() + 4;
        let adam = self.tensors.iter().filter(|(n, _)| n.starts_with("adam.")).count();
        if self.tensors.len() != expected + adam {
            return Err(Error::CorruptCheckpoint(format!(
                "{} tensors stored, expected {expected} plus optimiser state",
                self.tensors.len()
            )));
        }
        Ok(model)
    }

    /// Optimiser state for `model`, if the checkpoint carries one.
    pub fn restore_adam(&self, model: &Model<f32>) -> Result<Option<AdamState<f32>>> {
        if !self.tensors.iter().any(|(n, _)| n.starts_with(ADAM_M)) {
            return Ok(None);
        }
        let store = &model.store;
        let mut m = Vec::new();
        let mut v = Vec::new();
        for id in store.trainable_ids() {
            m.push(self.required(&format!("{ADAM_M}{}", store.name(id)))?.clone());
            v.push(self.required(&format!("{ADAM_V}{}", store.name(id)))?.clone());
        }
        AdamState::restore(store, self.adam_step, m, v).map(Some)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        payload.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            payload.extend_from_slice(&(name.len() as u32).to_le_bytes());
            payload.extend_from_slice(name.as_bytes());
            payload.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                payload.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let meta = serde_json::to_vec(&Metadata {
            model: self.model.clone(),
            data: self.data.clone(),
        })
        .expect("metadata serialises");

        let mut out = Vec::with_capacity(payload.len() + meta.len() + 128);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.digest());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.adam_step.to_le_bytes());
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        let checksum: [u8; 32] = Sha256::digest(&payload).into();
        out.extend_from_slice(&payload);
        out.extend_from_slice(&checksum);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::CorruptCheckpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::CorruptCheckpoint(format!(
                "unsupported format version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let digest: [u8; 32] = r.take(32, "digest")?.try_into().expect("32 bytes");
        let meta_len = r.u32("metadata length")? as usize;
        let meta: Metadata = serde_json::from_slice(r.take(meta_len, "metadata")?)
            .map_err(|e| Error::CorruptCheckpoint(format!("metadata: {e}")))?;
        if config_digest(&meta.model) != digest {
            return Err(Error::CorruptCheckpoint("metadata does not match the stored digest".into()));
        }
        let epoch = r.u64("epoch")?;
        let adam_step = r.u64("optimiser step")?;
        let payload_len = r.u64("payload length")?;
        let remaining = (bytes.len() - r.pos) as u64;
        if remaining != payload_len.saturating_add(32) {
            return Err(Error::CorruptCheckpoint(format!(
                "header announces {payload_len} payload bytes but {} remain after the header",
                remaining.saturating_sub(32)
            )));
        }
        let payload = r.take(payload_len as usize, "payload")?;
        let checksum = r.take(32, "checksum")?;
        if Sha256::digest(payload).as_slice() != checksum {
            return Err(Error::CorruptCheckpoint("payload checksum mismatch".into()));
        }

        let mut p = Reader { bytes: payload, pos: 0 };
        let count = p.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = p.u32("name length")? as usize;
            let name = std::str::from_utf8(p.take(name_len, "name")?)
                .map_err(|_| Error::CorruptCheckpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = p.u32("rank")? as usize;
            if rank > 8 {
                return Err(Error::CorruptCheckpoint(format!("tensor {name:?} has rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(p.u32("dimension")? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n <= payload.len() / 4)
                .ok_or_else(|| Error::CorruptCheckpoint(format!("tensor {name:?} is larger than the payload")))?;
            let raw = p.take(numel * 4, "tensor values")?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(&shape, data).map_err(|e| Error::CorruptCheckpoint(format!("tensor {name:?}: {e}")))?;
            tensors.push((name, t));
        }
        if p.pos != payload.len() {
            return Err(Error::CorruptCheckpoint("trailing bytes after the tensor table".into()));
        }
        Ok(Checkpoint {
            model: meta.model,
            data: meta.data,
            epoch,
            adam_step,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::CorruptCheckpoint(m) => Error::CorruptCheckpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::CorruptCheckpoint(format!("truncated while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}
