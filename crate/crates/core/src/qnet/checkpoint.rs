//! Versioned binary checkpoint container.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "DPQN" | format_version u32 | model_version u64
//! n_sizes u32 | sizes u32 * n_sizes
//! state_dim u32 | action_dim u32 | goal_dim u32 | hash_seed u64
//! pred f64 * P | target f64 * P
//! lr f64 | beta1 f64 | beta2 f64 | eps f64 | adam_step u64 | m f64 * P | v f64 * P
//! meta_len u32 | meta JSON bytes
//! digest u64   (first 8 bytes of SHA-256 over everything above)
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{AdamConfig, AdamState, MlpParams};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DPQN";
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model_version: u64,
    pub trainer_steps: u64,
    pub app_fingerprint: String,
    /// Times each function was triggered in the training data.
    #[serde(default)]
    pub heat: BTreeMap<crate::app_model::FunctionId, u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub pred: MlpParams,
    pub target: MlpParams,
    pub adam: AdamState,
    pub encoder: EncoderConfig,
    pub meta: CheckpointMeta,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::CheckpointFormat("unexpected end of data".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::CheckpointFormat("size overflow".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

fn digest64(bytes: &[u8]) -> u64 {
    let d = Sha256::digest(bytes);
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.pred.len() * 8 * 4 + 256);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.meta.model_version.to_le_bytes());
        let sizes = self.pred.sizes();
        out.extend_from_slice(&(sizes.len() as u32).to_le_bytes());
        for &s in sizes {
            out.extend_from_slice(&(s as u32).to_le_bytes());
        }
        for d in [self.encoder.state_dim, self.encoder.action_dim, self.encoder.goal_dim] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.encoder.hash_seed.to_le_bytes());
        let put = |out: &mut Vec<u8>, xs: &[f64]| {
            for x in xs {
                out.extend_from_slice(&x.to_le_bytes());
            }
        };
        put(&mut out, self.pred.as_slice());
        put(&mut out, self.target.as_slice());
        let c = self.adam.config;
        put(&mut out, &[c.lr, c.beta1, c.beta2, c.eps]);
        out.extend_from_slice(&self.adam.step.to_le_bytes());
        put(&mut out, &self.adam.m);
        put(&mut out, &self.adam.v);
        let meta = serde_json::to_vec(&self.meta).expect("meta serializes");
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        let digest = digest64(&out);
        out.extend_from_slice(&digest.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Digest);
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        if digest64(body) != u64::from_le_bytes(tail.try_into().unwrap()) {
            return Err(Error::Digest);
        }
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::CheckpointFormat("bad magic".into()));
        }
        let format = r.u32()?;
        if format != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::CheckpointFormat(format!("unknown format version {format}")));
        }
        let model_version = r.u64()?;
        let n_sizes = r.u32()? as usize;
        if n_sizes > 64 {
            return Err(Error::CheckpointFormat(format!("{n_sizes} layer sizes")));
        }
        let sizes = (0..n_sizes)
            .map(|_| r.u32().map(|s| s as usize))
            .collect::<Result<Vec<_>>>()?;
        let encoder = EncoderConfig {
            state_dim: r.u32()? as usize,
            action_dim: r.u32()? as usize,
            goal_dim: r.u32()? as usize,
            hash_seed: r.u64()?,
        };
        let n = MlpParams::zeros(&sizes)
            .map_err(|e| Error::CheckpointFormat(e.to_string()))?
            .len();
        let pred = MlpParams::from_parts(sizes.clone(), r.f64s(n)?)?;
        let target = MlpParams::from_parts(sizes, r.f64s(n)?)?;
        let config = AdamConfig {
            lr: r.f64()?,
            beta1: r.f64()?,
            beta2: r.f64()?,
            eps: r.f64()?,
        };
        let step = r.u64()?;
        let m = r.f64s(n)?;
        let v = r.f64s(n)?;
        let meta_len = r.u32()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| Error::CheckpointFormat(format!("meta: {e}")))?;
        if r.pos != body.len() {
            return Err(Error::CheckpointFormat("trailing bytes".into()));
        }
        if meta.model_version != model_version {
            return Err(Error::CheckpointFormat("header and meta disagree on model_version".into()));
        }
        Ok(Checkpoint {
            pred,
            target,
            adam: AdamState { config, m, v, step },
            encoder,
            meta,
        })
    }
}

/// Writes atomically: temp file in the same directory, then rename.
pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&ckpt.to_bytes())?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}
