//! Single-file training state container.
//!
//! Layout (little-endian): magic `MEMT5`, format version `u32`, `u32` length
//! plus JSON metadata, `u32` parameter count and tensor records, `u32` slot
//! count and slot records, trailing CRC32 of everything before it. A tensor
//! record is `u32` name length, name bytes, `u32` rank, `u64` dims, `f32`
//! payload.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::train::optim::Optimizer;

pub const MAGIC: &[u8; 5] = b"MEMT5";
pub const FORMAT_VERSION: u32 = 1;

/// Loop position and bookkeeping stored next to the tensors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Progress {
    pub global_step: u64,
    /// Epoch in progress (0-based).
    pub epoch: usize,
    /// Batches of `epoch` already consumed.
    pub batch_in_epoch: usize,
    /// Running sum and count of this epoch's training losses.
    pub epoch_loss_sum: f64,
    pub epoch_loss_count: u64,
    pub best_valid_loss: Option<f64>,
    pub vocab_fingerprint: Option<u32>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    config: RunConfig,
    progress: Progress,
    optimizer_step: u64,
}

/// Everything needed to continue (or reproduce) a run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: RunConfig,
    pub params: ParamStore<f32>,
    pub optimizer: Optimizer<f32>,
    pub progress: Progress,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, t.rank() as u32);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &x in t.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

impl TrainState {
    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = Meta {
            config: self.config.clone(),
            progress: self.progress.clone(),
            optimizer_step: self.optimizer.step,
        };
        let json = serde_json::to_vec(&meta).expect("metadata serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, FORMAT_VERSION);
        put_u32(&mut out, json.len() as u32);
        out.extend_from_slice(&json);
        put_u32(&mut out, self.params.len() as u32);
        for (name, t) in self.params.iter() {
            put_tensor(&mut out, name, t);
        }
        put_u32(&mut out, self.optimizer.slots.len() as u32);
        for (name, t) in &self.optimizer.slots {
            put_tensor(&mut out, name, t);
        }
        let crc = crc32fast::hash(&out);
        put_u32(&mut out, crc);
        out
    }

    /// Parses a container, checking magic, version and checksum, then that
    /// the stored tensors fit the stored model configuration.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let mut r = Reader { buf: body, pos: MAGIC.len() };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        if crc32fast::hash(body) != stored {
            return Err(Error::Checkpoint("checksum mismatch (truncated or corrupted file)".into()));
        }
        let len = r.u32()? as usize;
        let meta: Meta = serde_json::from_slice(r.take(len)?)
            .map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
        let mut params = ParamStore::new();
        for _ in 0..r.u32()? {
            let (name, t) = r.tensor()?;
            params.insert(name, t);
        }
        let mut optimizer = Optimizer::new(meta.config.optimizer.clone());
        optimizer.step = meta.optimizer_step;
        for _ in 0..r.u32()? {
            let (name, t) = r.tensor()?;
            optimizer.slots.insert(name, t);
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint("trailing bytes after slot records".into()));
        }
        meta.config.model.check_params(&params)?;
        Ok(TrainState {
            config: meta.config,
            params,
            optimizer,
            progress: meta.progress,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            e => e,
        })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint("unexpected end of data".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn tensor(&mut self) -> Result<(String, Tensor<f32>)> {
        let n = self.u32()? as usize;
        let name = std::str::from_utf8(self.take(n)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = self.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = self.take(numel.checked_mul(4).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("`{name}`: {e}")))?;
        Ok((name, t))
    }
}
