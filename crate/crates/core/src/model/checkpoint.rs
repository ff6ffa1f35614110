//! Binary parameter checkpoint.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "DVLM" | version u32 | stage tag (u32 len + UTF-8) | seed u64 | count u32
//! per parameter:
//!   name (u32 len + UTF-8) | dtype u8 (0 = f32, 1 = f64) | rank u32 | extents u32[rank]
//!   | row-major payload
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{DType, Element, ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"DVLM";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamRecord {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub payload: Vec<u8>,
}

impl ParamRecord {
    pub fn to_tensor<T: Element>(&self) -> Result<Tensor<T>> {
        let size = self.dtype.size();
        let values: Vec<T> = match self.dtype {
            DType::F32 => self
                .payload
                .chunks_exact(size)
                .map(|c| T::of(f32::get_le(c) as f64))
                .collect(),
            DType::F64 => self.payload.chunks_exact(size).map(|c| T::of(f64::get_le(c))).collect(),
        };
        Tensor::new(self.shape.clone(), values)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointFile {
    pub version: u32,
    pub stage_tag: String,
    pub seed: u64,
    pub params: Vec<ParamRecord>,
}

impl CheckpointFile {
    pub fn from_store<T: Element>(stage_tag: &str, seed: u64, store: &ParamStore<T>) -> Self {
        let params = store
            .iter()
            .map(|(_, p)| ParamRecord {
                name: p.name.clone(),
                dtype: T::DTYPE,
                shape: p.value.shape().to_vec(),
                payload: p.value.to_le_bytes(),
            })
            .collect();
        Self {
            version: FORMAT_VERSION,
            stage_tag: stage_tag.to_string(),
            seed,
            params,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        put_str(&mut out, &self.stage_tag);
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            put_str(&mut out, &p.name);
            out.push(p.dtype.code());
            out.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
            for &e in &p.shape {
                out.extend_from_slice(&(e as u32).to_le_bytes());
            }
            out.extend_from_slice(&p.payload);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let stage_tag = r.string()?;
        let seed = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.string()?;
            let code = r.take(1)?[0];
            let dtype = DType::from_code(code).ok_or_else(|| Error::Format(format!("unknown dtype code {code}")))?;
            let rank = r.u32()? as usize;
            if rank == 0 {
                return Err(Error::Format(format!("parameter {name} has rank 0")));
            }
            let shape = (0..rank)
                .map(|_| r.u32().map(|e| e as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |acc, &e| acc.checked_mul(e));
            let len = numel
                .and_then(|n| n.checked_mul(dtype.size()))
                .ok_or_else(|| Error::Format(format!("parameter {name} is too large")))?;
            let payload = r.take(len)?.to_vec();
            params.push(ParamRecord {
                name,
                dtype,
                shape,
                payload,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Self {
            version,
            stage_tag,
            seed,
            params,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        crate::util::write_atomic(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Overwrites every value in `store`; the name sets must match exactly.
    pub fn load_into<T: Element>(&self, store: &mut ParamStore<T>) -> Result<()> {
        if self.params.len() != store.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} parameters, model expects {}",
                self.params.len(),
                store.len()
            )));
        }
        for rec in &self.params {
            let id = store
                .id(&rec.name)
                .ok_or_else(|| Error::Format(format!("unexpected parameter {}", rec.name)))?;
            let t = rec.to_tensor::<T>()?;
            if t.shape() != store.value(id).shape() {
                return Err(Error::Format(format!(
                    "shape mismatch for {}: {:?} vs {:?}",
                    rec.name,
                    t.shape(),
                    store.value(id).shape()
                )));
            }
            store.get_mut(id).value = t;
        }
        Ok(())
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("invalid UTF-8 in checkpoint".into()))
    }
}
