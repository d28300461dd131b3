//! Binary checkpoint container.
//!
//! Layout (little endian):
//! `b"M360IQCK"`, `u32` schema, `u64` length + JSON block (configs, dtype,
//! counters, RNG state), `u32` block count, then per block: `u8` section
//! (0 parameter, 1 buffer, 2 Adam m, 3 Adam v), `u8` parameter kind,
//! `u32` name length + UTF-8 name, `u32` rank + `u64` extents, raw values.

use std::io::Read;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AdamState, TrainConfig};
use crate::data::ExtractionConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::ndgrad::{ParamKind, ParamStore, Tensor};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 8] = b"M360IQCK";
pub const CHECKPOINT_SCHEMA: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub extraction: ExtractionConfig,
    pub store: ParamStore<T>,
    pub adam: AdamState<T>,
    pub rng: ChaCha8Rng,
    pub epoch: usize,
    pub step: u64,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    model: ModelConfig,
    train: TrainConfig,
    extraction: ExtractionConfig,
    dtype: String,
    epoch: usize,
    step: u64,
    adam_t: u64,
    rng: ChaCha8Rng,
}

fn kind_code(k: ParamKind) -> u8 {
    match k {
        ParamKind::Weight => 0,
        ParamKind::Bias => 1,
        ParamKind::Norm => 2,
        ParamKind::GemExponent => 3,
        ParamKind::PositionBias => 4,
    }
}

fn kind_from(code: u8) -> Result<ParamKind> {
    Ok(match code {
        0 => ParamKind::Weight,
        1 => ParamKind::Bias,
        2 => ParamKind::Norm,
        3 => ParamKind::GemExponent,
        4 => ParamKind::PositionBias,
        c => return Err(Error::Checkpoint(format!("unknown parameter kind {c}"))),
    })
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_SCHEMA.to_le_bytes());
        let meta = Meta {
            model: self.model.clone(),
            train: self.train.clone(),
            extraction: self.extraction,
            dtype: T::DTYPE.to_string(),
            epoch: self.epoch,
            step: self.step,
            adam_t: self.adam.t,
            rng: self.rng.clone(),
        };
        let json = serde_json::to_vec(&meta)?;
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let mut blocks: Vec<(u8, u8, &str, &Tensor<T>)> = Vec::new();
        for (n, p) in self.store.iter() {
            blocks.push((0, kind_code(p.kind), n, &p.value));
        }
        for (n, b) in self.store.buffers() {
            blocks.push((1, 0, n, b));
        }
        for (n, m) in &self.adam.m {
            blocks.push((2, 0, n, m));
        }
        for (n, v) in &self.adam.v {
            blocks.push((3, 0, n, v));
        }
        out.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
        for (section, kind, name, t) in blocks {
            out.push(section);
            out.push(kind);
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let schema = read_u32(&mut r)?;
        if schema != CHECKPOINT_SCHEMA {
            return Err(bad(format!("unsupported schema {schema}")));
        }
        let len = read_u64(&mut r)? as usize;
        if len > r.len() {
            return Err(bad("truncated metadata"));
        }
        let meta: Meta = serde_json::from_slice(&r[..len])?;
        r = &r[len..];
        let width = match meta.dtype.as_str() {
            "f32" => 4,
            "f64" => 8,
            d => return Err(bad(format!("unknown dtype {d}"))),
        };
        let mut store = ParamStore::new();
        let mut adam = AdamState { m: Default::default(), v: Default::default(), t: meta.adam_t };
        let count = read_u32(&mut r)?;
        for _ in 0..count {
            let mut hdr = [0u8; 2];
            read_exact(&mut r, &mut hdr)?;
            let name_len = read_u32(&mut r)? as usize;
            if name_len > r.len() {
                return Err(bad("truncated block name"));
            }
            let name = std::str::from_utf8(&r[..name_len]).map_err(|_| bad("block name is not UTF-8"))?.to_string();
            r = &r[name_len..];
            let rank = read_u32(&mut r)? as usize;
            let shape = (0..rank).map(|_| read_u64(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            if n * width > r.len() {
                return Err(bad(format!("truncated data for `{name}`")));
            }
            let data: Vec<T> = r[..n * width]
                .chunks(width)
                .map(|c| if width == 4 { T::from_f64_lossy(f32::read_le(c) as f64) } else { T::from_f64_lossy(f64::read_le(c)) })
                .collect();
            r = &r[n * width..];
            let t = Tensor::new(&shape, data)?;
            match hdr[0] {
                0 => store.insert(name, t, kind_from(hdr[1])?)?,
                1 => store.insert_buffer(name, t)?,
                2 => {
                    adam.m.insert(name, t);
                }
                3 => {
                    adam.v.insert(name, t);
                }
                s => return Err(bad(format!("unknown section {s}"))),
            }
        }
        if !r.is_empty() {
            return Err(bad("trailing bytes"));
        }
        Ok(Checkpoint {
            model: meta.model,
            train: meta.train,
            extraction: meta.extraction,
            store,
            adam,
            rng: meta.rng,
            epoch: meta.epoch,
            step: meta.step,
        })
    }

    /// Atomic write.
    pub fn save(&self, path: &Path) -> Result<()> {
        crate::data::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut bytes = Vec::new();
        f.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|_| bad("unexpected end of file"))
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}
