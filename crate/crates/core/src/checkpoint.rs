//! Versioned binary container of named tensors plus JSON metadata.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes   "HPHMCKPT"
//! version    u32       currently 1
//! meta_len   u32       length of the metadata blob
//! metadata   meta_len  UTF-8 JSON object
//! count      u32       number of tensors
//! per tensor:
//!   name_len u32, name bytes (UTF-8)
//!   dtype    u8        1 = f32, 2 = f64
//!   rank     u32, then rank x u64 extents
//!   data     product(extents) x dtype width
//! ```
//!
//! Tensors keep insertion order, so writing the same container twice gives
//! identical bytes.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use serde_json::Value;

use crate::error::{Error, Result};
use crate::tensor::{Precision, Real, Tensor};

pub const MAGIC: &[u8; 8] = b"HPHMCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum StoredTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl StoredTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            StoredTensor::F32(t) => t.shape(),
            StoredTensor::F64(t) => t.shape(),
        }
    }

    pub fn precision(&self) -> Precision {
        match self {
            StoredTensor::F32(_) => Precision::Standard,
            StoredTensor::F64(_) => Precision::Wide,
        }
    }

    pub fn to_real<T: Real>(&self) -> Tensor<T> {
        match self {
            StoredTensor::F32(t) => t.cast(),
            StoredTensor::F64(t) => t.cast(),
        }
    }

    fn from_real<T: Real>(t: &Tensor<T>) -> Self {
        match T::PRECISION {
            Precision::Standard => StoredTensor::F32(t.cast()),
            Precision::Wide => StoredTensor::F64(t.cast()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub metadata: Value,
    pub tensors: IndexMap<String, StoredTensor>,
}

impl Default for Container {
    fn default() -> Self {
        Self::new(Value::Object(Default::default()))
    }
}

impl Container {
    pub fn new(metadata: Value) -> Self {
        Self {
            metadata,
            tensors: IndexMap::new(),
        }
    }

    pub fn insert<T: Real>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.tensors.insert(name.into(), StoredTensor::from_real(t));
    }

    /// Tensor `name` converted to `T`, checked against `shape` when given.
    pub fn get<T: Real>(&self, name: &str, shape: Option<&[usize]>) -> Result<Tensor<T>> {
        let stored = self
            .tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
        if let Some(expected) = shape {
            if stored.shape() != expected {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    stored.shape(),
                    expected
                )));
            }
        }
        Ok(stored.to_real())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write(&mut out)?;
        Ok(out)
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let meta = serde_json::to_vec(&self.metadata)?;
        write_len(w, meta.len())?;
        w.write_all(&meta)?;
        write_len(w, self.tensors.len())?;
        for (name, t) in &self.tensors {
            write_len(w, name.len())?;
            w.write_all(name.as_bytes())?;
            let (tag, shape) = match t {
                StoredTensor::F32(t) => (1u8, t.shape()),
                StoredTensor::F64(t) => (2u8, t.shape()),
            };
            w.write_all(&[tag])?;
            write_len(w, shape.len())?;
            for &d in shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            let mut buf = Vec::new();
            match t {
                StoredTensor::F32(t) => t.data().iter().for_each(|&v| v.write_le(&mut buf)),
                StoredTensor::F64(t) => t.data().iter().for_each(|&v| v.write_le(&mut buf)),
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        Self::read(&mut r)
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        read_exact(r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic; not a checkpoint container".into()));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version}, expected {VERSION}"
            )));
        }
        let meta_len = read_u32(r)? as usize;
        let mut meta = vec![0u8; meta_len];
        read_exact(r, &mut meta)?;
        let metadata: Value = serde_json::from_slice(&meta)?;
        let count = read_u32(r)?;
        let mut tensors = IndexMap::new();
        for _ in 0..count {
            let name_len = read_u32(r)? as usize;
            let mut name = vec![0u8; name_len];
            read_exact(r, &mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let mut tag = [0u8; 1];
            read_exact(r, &mut tag)?;
            let rank = read_u32(r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut b = [0u8; 8];
                read_exact(r, &mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let numel: usize = shape.iter().product();
            let t = match tag[0] {
                1 => StoredTensor::F32(read_tensor::<f32, _>(r, &shape, numel)?),
                2 => StoredTensor::F64(read_tensor::<f64, _>(r, &shape, numel)?),
                other => return Err(Error::Checkpoint(format!("unknown dtype tag {other} for `{name}`"))),
            };
            if tensors.insert(name.clone(), t).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor `{name}`")));
            }
        }
        Ok(Self { metadata, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn write_len<W: Write>(w: &mut W, n: usize) -> Result<()> {
    let n = u32::try_from(n).map_err(|_| Error::Checkpoint(format!("length {n} exceeds u32")))?;
    w.write_all(&n.to_le_bytes())?;
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Checkpoint("truncated container".into()),
        _ => Error::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_tensor<T: Real, R: Read>(r: &mut R, shape: &[usize], numel: usize) -> Result<Tensor<T>> {
    let mut buf = vec![0u8; numel * T::BYTES];
    read_exact(r, &mut buf)?;
    let data = buf.chunks_exact(T::BYTES).map(T::read_le).collect();
    Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_identical() {
        let mut c = Container::new(serde_json::json!({"kind": "test", "n": 3}));
        c.insert(
            "a",
            &Tensor::<f32>::from_f64(&[2, 2], &[1.0, -2.5, 3.25, 1e-7]).unwrap(),
        );
        c.insert("b", &Tensor::<f64>::from_f64(&[3], &[0.1, 0.2, 0.3]).unwrap());
        let bytes = c.to_bytes().unwrap();
        let back = Container::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn shape_checked_on_get() {
        let mut c = Container::default();
        c.insert("w", &Tensor::<f32>::zeros(&[2, 3]));
        assert!(c.get::<f32>("w", Some(&[2, 3])).is_ok());
        assert!(c.get::<f32>("w", Some(&[3, 2])).is_err());
        assert!(c.get::<f32>("missing", None).is_err());
    }

    #[test]
    fn truncated_and_foreign_files_rejected() {
        let mut c = Container::default();
        c.insert("w", &Tensor::<f64>::zeros(&[4]));
        let bytes = c.to_bytes().unwrap();
        assert!(Container::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Container::from_bytes(b"NOTACKPT\x01\0\0\0").is_err());
    }
}
