//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"CLORAECK"  u32 version
//! u64 manifest_len  manifest (UTF-8 JSON)
//! u64 n_tensors
//! repeat n_tensors:
//!     u32 name_len  name (UTF-8)
//!     u8 frozen
//!     u32 ndim  u64 dims[ndim]
//!     f64 values[product(dims)]
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{CoreError, Result};
use crate::param::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"CLORAECK";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub frozen: bool,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: serde_json::Value,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_store<T: Scalar>(manifest: serde_json::Value, store: &ParamStore<T>) -> Self {
        let tensors = store
            .iter()
            .map(|(_, p)| NamedTensor {
                name: p.name.clone(),
                frozen: p.frozen,
                shape: p.value.shape().to_vec(),
                values: p.value.data().iter().map(|v| v.to_f64_lossless()).collect(),
            })
            .collect();
        Self { manifest, tensors }
    }

    /// Overwrites every parameter of `store` with the checkpointed value.
    /// Names and shapes must match one-to-one.
    pub fn apply_to<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        if self.tensors.len() != store.len() {
            return Err(CoreError::Checkpoint(format!(
                "checkpoint holds {} tensors, model has {}",
                self.tensors.len(),
                store.len()
            )));
        }
        for t in &self.tensors {
            let id = store.id(&t.name)?;
            let shape = store.value(id).shape().to_vec();
            if shape != t.shape {
                return Err(CoreError::Checkpoint(format!(
                    "{}: checkpoint shape {:?} vs model shape {:?}",
                    t.name, t.shape, shape
                )));
            }
            *store.value_mut(id) = Tensor::from_f64(shape, &t.values)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let manifest = serde_json::to_vec(&self.manifest).expect("JSON value serializes");
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(u8::from(t.frozen));
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &t.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(CoreError::Checkpoint("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(CoreError::Checkpoint(format!("unsupported version {version}")));
        }
        let mlen = read_u64(&mut r)? as usize;
        let manifest_bytes = take(&mut r, mlen)?;
        let manifest = serde_json::from_slice(manifest_bytes).map_err(|e| CoreError::Checkpoint(format!("manifest: {e}")))?;
        let n = read_u64(&mut r)? as usize;
        let mut tensors = Vec::with_capacity(n);
        for _ in 0..n {
            let name_len = read_u32(&mut r)? as usize;
            let name = std::str::from_utf8(take(&mut r, name_len)?)
                .map_err(|e| CoreError::Checkpoint(format!("name: {e}")))?
                .to_string();
            let frozen = take(&mut r, 1)?[0] != 0;
            let ndim = read_u32(&mut r)? as usize;
            let shape = (0..ndim).map(|_| read_u64(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let count: usize = shape.iter().product();
            let payload = take(&mut r, count * 8)?;
            let values = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push(NamedTensor {
                name,
                frozen,
                shape,
                values,
            });
        }
        if !r.is_empty() {
            return Err(CoreError::Checkpoint(format!("{} trailing bytes", r.len())));
        }
        Ok(Self { manifest, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

fn take<'a>(r: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if r.len() < n {
        return Err(CoreError::Checkpoint("truncated".into()));
    }
    let (head, tail) = r.split_at(n);
    *r = tail;
    Ok(head)
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    buf.copy_from_slice(take(r, buf.len())?);
    Ok(())
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    Ok(u32::from_le_bytes(take(r, 4)?.try_into().expect("4 bytes")))
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    Ok(u64::from_le_bytes(take(r, 8)?.try_into().expect("8 bytes")))
}
