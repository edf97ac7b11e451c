//! Binary checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"VDSNCKPT"  u32 version  u32 meta_len  meta_len bytes of JSON
//! u64 blob_count
//! per blob: u32 name_len, name, u32 ndim, u64 dims[ndim], f32 data[prod(dims)], u32 crc32
//! ```
//!
//! The CRC covers the blob's name, shape and data bytes.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use vdsnet_core::optim::{Adam, AdamConfig};
use vdsnet_core::zoo::{ModelSpec, Network};
use vdsnet_core::Tensor;

use crate::config::TrainConfig;

pub const MAGIC: &[u8; 8] = b"VDSNCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("file truncated at byte {offset} while reading {what}")]
    Truncated { offset: usize, what: &'static str },
    #[error("checksum mismatch in blob {name:?} at byte {offset}")]
    Checksum { name: String, offset: usize },
    #[error("malformed metadata at byte {offset}: {source}")]
    Metadata {
        offset: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("model spec digest mismatch: checkpoint has {found}, expected {expected}")]
    DigestMismatch { expected: String, found: String },
    #[error("checkpoint contents inconsistent: {0}")]
    Inconsistent(String),
}

/// SHA-256 of the spec's JSON serialization, hex encoded.
pub fn spec_digest(spec: &ModelSpec) -> String {
    let json = serde_json::to_vec(spec).expect("model specs always serialize");
    Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub spec: ModelSpec,
    pub spec_digest: String,
    pub config: Option<TrainConfig>,
    pub epoch: usize,
    pub best_val_loss: Option<f64>,
    pub adam: AdamConfig,
    pub adam_step: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: Vec<Tensor<f32>>,
    pub buffers: Vec<Tensor<f32>>,
    pub adam_m: Vec<Vec<f32>>,
    pub adam_v: Vec<Vec<f32>>,
}

impl Checkpoint {
    pub fn capture(
        net: &Network<f32>,
        adam: &Adam<f32>,
        config: Option<&TrainConfig>,
        epoch: usize,
        best_val_loss: Option<f64>,
    ) -> Self {
        Checkpoint {
            meta: CheckpointMeta {
                spec: net.spec().clone(),
                spec_digest: spec_digest(net.spec()),
                config: config.cloned(),
                epoch,
                best_val_loss,
                adam: adam.config,
                adam_step: adam.step,
            },
            params: net.params().to_vec(),
            buffers: net.buffers().to_vec(),
            adam_m: adam.m.clone(),
            adam_v: adam.v.clone(),
        }
    }

    pub fn network(&self) -> Result<Network<f32>, CheckpointError> {
        Network::from_parts(self.meta.spec.clone(), self.params.clone(), self.buffers.clone())
            .map_err(|e| CheckpointError::Inconsistent(e.to_string()))
    }

    pub fn optimizer(&self) -> Adam<f32> {
        Adam {
            config: self.meta.adam,
            step: self.meta.adam_step,
            m: self.adam_m.clone(),
            v: self.adam_v.clone(),
        }
    }

    /// Fails unless the checkpoint was written for `spec`.
    pub fn expect_spec(&self, spec: &ModelSpec) -> Result<(), CheckpointError> {
        let expected = spec_digest(spec);
        if expected != self.meta.spec_digest {
            return Err(CheckpointError::DigestMismatch {
                expected,
                found: self.meta.spec_digest.clone(),
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.meta).expect("metadata always serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        let blobs = self.blobs();
        out.extend_from_slice(&(blobs.len() as u64).to_le_bytes());
        for (name, shape, data) in blobs {
            let start = out.len();
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for d in &shape {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
            let crc = crc32fast::hash(&out[start..]);
            out.extend_from_slice(&crc.to_le_bytes());
        }
        out
    }

    fn blobs(&self) -> Vec<(String, Vec<usize>, &[f32])> {
        let plan = self.meta.spec.plan().ok();
        let param_name = |i: usize| plan.as_ref().map_or_else(|| format!("{i:03}"), |p| p.params[i].name.clone());
        let buffer_name = |i: usize| plan.as_ref().map_or_else(|| format!("{i:03}"), |p| p.buffers[i].name.clone());
        let mut blobs = Vec::new();
        for (i, p) in self.params.iter().enumerate() {
            blobs.push((format!("param/{}", param_name(i)), p.shape().to_vec(), p.data()));
        }
        for (i, b) in self.buffers.iter().enumerate() {
            blobs.push((format!("buffer/{}", buffer_name(i)), b.shape().to_vec(), b.data()));
        }
        for (i, m) in self.adam_m.iter().enumerate() {
            blobs.push((format!("adam_m/{}", param_name(i)), vec![m.len()], m.as_slice()));
        }
        for (i, v) in self.adam_v.iter().enumerate() {
            blobs.push((format!("adam_v/{}", param_name(i)), vec![v.len()], v.as_slice()));
        }
        blobs
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8, "magic")? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let meta_len = r.u32("metadata length")? as usize;
        let meta_at = r.pos;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len, "metadata")?)
            .map_err(|source| CheckpointError::Metadata { offset: meta_at, source })?;
        if spec_digest(&meta.spec) != meta.spec_digest {
            return Err(CheckpointError::DigestMismatch {
                expected: spec_digest(&meta.spec),
                found: meta.spec_digest.clone(),
            });
        }
        let count = r.u64("blob count")? as usize;
        let mut blobs = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let start = r.pos;
            let name_len = r.u32("blob name length")? as usize;
            let name = String::from_utf8_lossy(r.take(name_len, "blob name")?).into_owned();
            let ndim = r.u32("blob rank")? as usize;
            let mut shape = Vec::with_capacity(ndim.min(8));
            for _ in 0..ndim {
                shape.push(r.u64("blob shape")? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or(CheckpointError::Truncated { offset: r.pos, what: "blob data" })?;
            let raw = r.take(n, "blob data")?;
            let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            let crc_at = r.pos;
            let crc = r.u32("blob checksum")?;
            if crc != crc32fast::hash(&bytes[start..crc_at]) {
                return Err(CheckpointError::Checksum { name, offset: start });
            }
            blobs.push((name, shape, data));
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Inconsistent(format!("{} trailing bytes", bytes.len() - r.pos)));
        }

        let mut ck = Checkpoint {
            meta,
            params: Vec::new(),
            buffers: Vec::new(),
            adam_m: Vec::new(),
            adam_v: Vec::new(),
        };
        for (name, shape, data) in blobs {
            let tensor = || Tensor::new(&shape, data.clone()).map_err(|e| CheckpointError::Inconsistent(e.to_string()));
            match name.split_once('/').map(|(k, _)| k) {
                Some("param") => ck.params.push(tensor()?),
                Some("buffer") => ck.buffers.push(tensor()?),
                Some("adam_m") => ck.adam_m.push(data),
                Some("adam_v") => ck.adam_v.push(data),
                _ => return Err(CheckpointError::Inconsistent(format!("unknown blob {name:?}"))),
            }
        }
        if ck.adam_m.len() != ck.params.len() || ck.adam_v.len() != ck.params.len() {
            return Err(CheckpointError::Inconsistent("optimizer state does not match parameters".into()));
        }
        ck.network()?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(CheckpointError::Truncated { offset: self.pos, what });
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}
