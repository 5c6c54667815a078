//! Versioned binary tensor container used for checkpoints and dataset dumps.
//!
//! Layout (integers little-endian): magic `SFX1`, u32 header length, header
//! JSON, u32 tensor count, then per tensor: u32 name length, name, u8 dtype
//! tag, u8 rank, u64 per dimension, payload.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::model::{DenoiserConfig, DenoiserParams};
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 4] = b"SFX1";
const MAX_HEADER: usize = 1 << 24;
const MAX_RANK: usize = 8;

/// A tensor as stored, before conversion to a working precision.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub dtype: u8,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

impl StoredTensor {
    pub fn from_tensor<T: Real>(name: &str, t: &Tensor<T>) -> Self {
        let mut bytes = Vec::with_capacity(t.numel() * T::BYTES);
        for &v in t.data() {
            v.write_le(&mut bytes);
        }
        Self { name: name.to_string(), dtype: T::DTYPE_TAG, shape: t.shape().to_vec(), bytes }
    }

    /// Decode, casting if the stored precision differs from `T`.
    pub fn to_tensor<T: Real>(&self) -> Result<Tensor<T>> {
        match self.dtype {
            0 => decode::<f32>(&self.shape, &self.bytes).map(|t| t.cast()),
            1 => decode::<f64>(&self.shape, &self.bytes).map(|t| t.cast()),
            d => Err(Error::Format(format!("tensor {}: unknown dtype tag {d}", self.name))),
        }
    }
}

fn decode<T: Real>(shape: &[usize], bytes: &[u8]) -> Result<Tensor<T>> {
    let data = bytes.chunks_exact(T::BYTES).map(T::read_le).collect();
    Tensor::new(shape.to_vec(), data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub header: Value,
    pub tensors: Vec<StoredTensor>,
}

impl Container {
    pub fn get(&self, name: &str) -> Option<&StoredTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn tensor<T: Real>(&self, name: &str) -> Result<Tensor<T>> {
        self.get(name).ok_or_else(|| Error::Format(format!("missing tensor {name}")))?.to_tensor()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        let header = serde_json::to_vec(&self.header)?;
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            if t.shape.len() > MAX_RANK {
                return Err(Error::Format(format!("tensor {} has rank {}", t.name, t.shape.len())));
            }
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.dtype);
            out.push(t.shape.len() as u8);
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&t.bytes);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("bad magic, not an SFX1 container".into()));
        }
        let hlen = read_u32(&mut r)? as usize;
        if hlen > MAX_HEADER || hlen > r.len() {
            return Err(Error::Format(format!("header length {hlen} out of range")));
        }
        let header: Value = serde_json::from_slice(&r[..hlen])?;
        r = &r[hlen..];
        let count = read_u32(&mut r)? as usize;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let nlen = read_u32(&mut r)? as usize;
            if nlen > r.len() {
                return Err(Error::Format("truncated tensor name".into()));
            }
            let name = std::str::from_utf8(&r[..nlen]).map_err(|e| Error::Format(e.to_string()))?.to_string();
            r = &r[nlen..];
            let mut tag = [0u8; 2];
            read_exact(&mut r, &mut tag)?;
            let (dtype, rank) = (tag[0], tag[1] as usize);
            let width = match dtype {
                0 => 4,
                1 => 8,
                d => return Err(Error::Format(format!("tensor {name}: unknown dtype tag {d}"))),
            };
            if rank > MAX_RANK {
                return Err(Error::Format(format!("tensor {name}: rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            let mut numel: usize = 1;
            for _ in 0..rank {
                let mut b = [0u8; 8];
                read_exact(&mut r, &mut b)?;
                let d = u64::from_le_bytes(b) as usize;
                numel = numel.checked_mul(d).ok_or_else(|| Error::Format(format!("tensor {name}: shape overflow")))?;
                shape.push(d);
            }
            let nbytes = numel.checked_mul(width).filter(|&n| n <= r.len());
            let nbytes = nbytes.ok_or_else(|| Error::Format(format!("tensor {name}: truncated payload")))?;
            tensors.push(StoredTensor { name, dtype, shape, bytes: r[..nbytes].to_vec() });
            r = &r[nbytes..];
        }
        if !r.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes", r.len())));
        }
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    if r.len() < buf.len() {
        return Err(Error::Format("unexpected end of container".into()));
    }
    buf.copy_from_slice(&r[..buf.len()]);
    *r = &r[buf.len()..];
    Ok(())
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Training provenance stored next to the weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: String,
    pub step: usize,
    /// Content hash of the parameters this run was initialized from.
    pub parent_hash: Option<String>,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    kind: String,
    config: DenoiserConfig,
    meta: CheckpointMeta,
}

pub fn model_container<T: Real>(params: &DenoiserParams<T>, meta: &CheckpointMeta) -> Result<Container> {
    let header = serde_json::to_value(ModelHeader { kind: "denoiser".into(), config: params.config.clone(), meta: meta.clone() })?;
    let tensors = params.named().map(|(n, t)| StoredTensor::from_tensor(n, t)).collect();
    Ok(Container { header, tensors })
}

pub fn save_model<T: Real>(path: &Path, params: &DenoiserParams<T>, meta: &CheckpointMeta) -> Result<()> {
    model_container(params, meta)?.save(path)
}

pub fn model_from_container<T: Real>(c: &Container) -> Result<(DenoiserParams<T>, CheckpointMeta)> {
    let header: ModelHeader = serde_json::from_value(c.header.clone())?;
    if header.kind != "denoiser" {
        return Err(Error::Format(format!("container holds {:?}, not a denoiser", header.kind)));
    }
    let named = c.tensors.iter().map(|t| Ok((t.name.clone(), t.to_tensor()?))).collect::<Result<Vec<_>>>()?;
    Ok((DenoiserParams::from_named(header.config, named)?, header.meta))
}

pub fn load_model<T: Real>(path: &Path) -> Result<(DenoiserParams<T>, CheckpointMeta)> {
    model_from_container(&Container::load(path)?)
}
