//! Binary tensor files.
//!
//! A tensor record is little-endian: the magic bytes `DFL1`, a `u32` rank,
//! `rank` dimensions as `u64`, then the payload as `f64` values in row-major
//! order. A parameter store (`DFLP`) is a `u32` entry count followed by, for
//! each entry in name order, a `u32` name length, the UTF-8 name and one tensor
//! record.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{CoreError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: &[u8; 4] = b"DFL1";
pub const STORE_MAGIC: &[u8; 4] = b"DFLP";

pub fn write_tensor<S: Scalar, W: Write>(w: &mut W, t: &Tensor<S>) -> Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.len() * 8);
    for &x in t.data() {
        buf.extend_from_slice(&x.as_f64().to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

pub fn read_tensor<S: Scalar, R: Read>(r: &mut R) -> Result<Tensor<S>> {
    let magic: [u8; 4] = read_array(r)?;
    if &magic != TENSOR_MAGIC {
        return Err(CoreError::Format(format!("bad tensor magic {magic:?}")));
    }
    let rank = u32::from_le_bytes(read_array(r)?) as usize;
    if rank > 16 {
        return Err(CoreError::Format(format!("implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(u64::from_le_bytes(read_array(r)?) as usize);
    }
    let n: usize = shape.iter().product();
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| S::lit(f64::from_le_bytes(c.try_into().expect("8-byte chunk"))))
        .collect();
    Tensor::new(shape, data)
}

pub fn tensor_to_bytes<S: Scalar>(t: &Tensor<S>) -> Vec<u8> {
    let mut buf = Vec::new();
    write_tensor(&mut buf, t).expect("writing to a Vec cannot fail");
    buf
}

pub fn save_tensor<S: Scalar>(path: impl AsRef<Path>, t: &Tensor<S>) -> Result<()> {
    fs::write(path, tensor_to_bytes(t))?;
    Ok(())
}

pub fn load_tensor<S: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<S>> {
    let bytes = fs::read(path)?;
    let mut cursor = bytes.as_slice();
    let t = read_tensor(&mut cursor)?;
    if !cursor.is_empty() {
        return Err(CoreError::Format(format!("{} trailing bytes", cursor.len())));
    }
    Ok(t)
}

/// Named parameter tensors, ordered by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<S> {
    entries: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<S>) {
        self.entries.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<S>> {
        self.entries
            .get(name)
            .ok_or_else(|| CoreError::Format(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<S>)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(STORE_MAGIC);
        buf.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            write_tensor(&mut buf, t).expect("writing to a Vec cannot fail");
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let magic: [u8; 4] = read_array(&mut r)?;
        if &magic != STORE_MAGIC {
            return Err(CoreError::Format(format!("bad store magic {magic:?}")));
        }
        let count = u32::from_le_bytes(read_array(&mut r)?) as usize;
        let mut store = Self::new();
        for _ in 0..count {
            let len = u32::from_le_bytes(read_array(&mut r)?) as usize;
            if len > r.len() {
                return Err(CoreError::Format("truncated name".into()));
            }
            let (name, rest) = r.split_at(len);
            let name = std::str::from_utf8(name)
                .map_err(|e| CoreError::Format(e.to_string()))?
                .to_owned();
            r = rest;
            store.insert(name, read_tensor(&mut r)?);
        }
        if !r.is_empty() {
            return Err(CoreError::Format(format!("{} trailing bytes", r.len())));
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::<f64>::from_f64(&[2, 1], &[1.5, -2.0]).unwrap();
        let b = tensor_to_bytes(&t);
        assert_eq!(&b[..4], b"DFL1");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(b[8..16].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(b[16..24].try_into().unwrap()), 1);
        assert_eq!(f64::from_le_bytes(b[24..32].try_into().unwrap()), 1.5);
        assert_eq!(b.len(), 4 + 4 + 16 + 16);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let t = Tensor::<f64>::from_f64(&[3], &[1., 2., 3.]).unwrap();
        let mut b = tensor_to_bytes(&t);
        assert!(read_tensor::<f64, _>(&mut &b[..b.len() - 1]).is_err());
        b[0] = b'X';
        assert!(read_tensor::<f64, _>(&mut b.as_slice()).is_err());
    }

    #[test]
    fn store_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = ParamStore::<f64>::new();
        s.insert("w", Tensor::from_f64(&[2, 2], &[1., 2., 3., 4.]).unwrap());
        s.insert("b", Tensor::scalar(0.25));
        let p = dir.path().join("p.bin");
        s.save(&p).unwrap();
        assert_eq!(ParamStore::load(&p).unwrap(), s);
    }
}
