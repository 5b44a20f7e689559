//! Binary checkpoint format.
//!
//! ```text
//! "DCPA" | version:u8 | config_len:u32 | config | meta_len:u32 | meta
//!        | n_params:u32 | { name_len:u32 | name | rank:u8 | extents:u32×rank | f32×numel }
//! ```
//!
//! All integers and floats are little-endian.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CheckpointError, Error, Result};
use crate::tensor::Tensor;
use crate::unet::{Model, ModelConfig, Param};

pub const MAGIC: &[u8; 4] = b"DCPA";
pub const VERSION: u8 = 1;

/// Training state stored next to the weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epoch: u32,
    pub val_f1: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub meta: TrainingMeta,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + 4 * self.model.num_params());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);

        let cfg = self.model.config();
        let mut rec = Vec::with_capacity(24);
        for v in [cfg.depth, cfg.base_width, cfg.in_channels, cfg.num_classes] {
            rec.extend_from_slice(&(v as u32).to_le_bytes());
        }
        rec.extend_from_slice(&cfg.seed.to_le_bytes());
        out.extend_from_slice(&(rec.len() as u32).to_le_bytes());
        out.extend_from_slice(&rec);

        let mut meta = Vec::with_capacity(12);
        meta.extend_from_slice(&self.meta.epoch.to_le_bytes());
        meta.extend_from_slice(&self.meta.val_f1.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);

        let params = self.model.params();
        out.extend_from_slice(&(params.len() as u32).to_le_bytes());
        for p in params {
            out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.push(p.value.shape().len() as u8);
            for &e in p.value.shape() {
                out.extend_from_slice(&(e as u32).to_le_bytes());
            }
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4, "magic").map_err(|_| CheckpointError::BadMagic)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u8("version")?;
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }

        let cfg_len = r.u32("config length")? as usize;
        let mut c = Reader { buf: r.take(cfg_len, "config record")?, pos: 0 };
        let config = ModelConfig {
            depth: c.u32("config")? as usize,
            base_width: c.u32("config")? as usize,
            in_channels: c.u32("config")? as usize,
            num_classes: c.u32("config")? as usize,
            seed: c.u64("config")?,
        };
        config.validate().map_err(|e| CheckpointError::Corrupt(e.to_string()))?;

        let meta_len = r.u32("metadata length")? as usize;
        let mut m = Reader { buf: r.take(meta_len, "metadata record")?, pos: 0 };
        let meta = TrainingMeta { epoch: m.u32("metadata")?, val_f1: m.f64("metadata")? };

        let n = r.u32("parameter count")? as usize;
        let mut params = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            let name_len = r.u32("parameter name")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "parameter name")?)
                .map_err(|_| CheckpointError::Corrupt("parameter name is not UTF-8".into()))?
                .to_string();
            let rank = r.u8("parameter rank")? as usize;
            let shape = (0..rank).map(|_| r.u32("parameter extents").map(|v| v as usize)).collect::<Result<Vec<_>, _>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &e| acc.checked_mul(e))
                .ok_or_else(|| CheckpointError::Corrupt(format!("{name}: extents overflow")))?;
            let raw = r.take(numel.checked_mul(4).ok_or(CheckpointError::Truncated("parameter values"))?, "parameter values")?;
            let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
            let value = Tensor::new(&shape, data).map_err(|e| CheckpointError::Corrupt(format!("{name}: {e}")))?;
            params.push(Param { name, value });
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let model = Model::from_params(config, params).map_err(|e| CheckpointError::ParamMismatch(e.to_string()))?;
        Ok(Self { model, meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingFile(path.to_path_buf())
            } else {
                Error::io(path, e)
            }
        })?;
        Self::from_bytes(&bytes).map_err(|kind| Error::Checkpoint { path: path.to_path_buf(), kind })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(CheckpointError::Truncated(what))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, CheckpointError> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self, what: &'static str) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}
