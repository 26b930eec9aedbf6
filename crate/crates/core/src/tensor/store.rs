//! Named parameter collections and their on-disk format.
//!
//! A [`ParameterStore`] maps stable dotted names (`"decoder.layer3.ffn.w1.weight"`)
//! to tensors, ordered by name so every traversal — initialization, the
//! optimizer loop, serialization — visits parameters in the same order.
//!
//! The file format ("PFDW") is a flat little-endian record stream:
//!
//! ```text
//! magic "PFDW" | version u32 | count u32
//! repeated count times:
//!   name_len u32 | name utf-8 | rank u32 | extents u64 × rank | values f64 × numel
//! ```
//!
//! Entries are written in name order, so two stores with equal contents
//! serialize to byte-identical files.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::Tensor;

pub const PFDW_MAGIC: [u8; 4] = *b"PFDW";
pub const PFDW_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {0:?}, expected \"PFDW\"")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("malformed parameter file: {0}")]
    Corrupt(String),
}

#[derive(Default)]
pub struct ParameterStore {
    params: BTreeMap<String, Tensor>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        debug_assert!(!self.params.contains_key(&name), "duplicate parameter {name}");
        self.params.insert(name, tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    /// Lookup that panics with the missing name — model wiring uses this for
    /// parameters it registered itself, where absence is a bug.
    pub fn expect(&self, name: &str) -> &Tensor {
        self.params.get(name).unwrap_or_else(|| panic!("parameter {name} not in store"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.params.remove(name)
    }

    /// Name-ordered iteration.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> Vec<&str> {
        self.params.keys().map(String::as_str).collect()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar values across all tensors.
    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn zero_grads(&self) {
        for t in self.params.values() {
            t.zero_grad();
        }
    }

    /// Global L2 norm over every parameter's gradient; parameters without a
    /// gradient contribute zero.
    pub fn grad_global_norm(&self) -> f64 {
        let mut sq = 0.0;
        for t in self.params.values() {
            if let Some(g) = t.grad() {
                sq += g.iter().map(|v| v * v).sum::<f64>();
            }
        }
        sq.sqrt()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), StoreError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&PFDW_MAGIC)?;
        w.write_all(&PFDW_VERSION.to_le_bytes())?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for (name, t) in &self.params {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.rank() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            let data = t.data();
            let mut buf = Vec::with_capacity(data.len() * 8);
            for v in data.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a PFDW file. Every tensor comes back as a gradient-tracking
    /// leaf, ready to train; callers that only run inference simply never
    /// call backward.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if magic != PFDW_MAGIC {
            return Err(StoreError::BadMagic(magic));
        }
        let version = read_u32(&mut r)?;
        if version != PFDW_VERSION {
            return Err(StoreError::UnsupportedVersion(version));
        }
        let count = read_u32(&mut r)?;
        let mut store = Self::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            if name_len > 4096 {
                return Err(StoreError::Corrupt(format!("name length {name_len} is implausible")));
            }
            let mut name_buf = vec![0u8; name_len];
            r.read_exact(&mut name_buf)?;
            let name = String::from_utf8(name_buf)
                .map_err(|e| StoreError::Corrupt(format!("non-utf8 parameter name: {e}")))?;
            let rank = read_u32(&mut r)? as usize;
            if rank > 16 {
                return Err(StoreError::Corrupt(format!("rank {rank} is implausible")));
            }
            let mut shape = Vec::with_capacity(rank);
            let mut numel: usize = 1;
            for _ in 0..rank {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                let d = u64::from_le_bytes(b) as usize;
                numel = numel
                    .checked_mul(d)
                    .ok_or_else(|| StoreError::Corrupt(format!("extent overflow in {name}")))?;
                shape.push(d);
            }
            let mut bytes = vec![0u8; numel * 8];
            r.read_exact(&mut bytes)?;
            let data: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let tensor = Tensor::from_vec(data, &shape)
                .map_err(|e| StoreError::Corrupt(format!("tensor {name}: {e}")))?
                .with_grad();
            if store.params.contains_key(&name) {
                return Err(StoreError::Corrupt(format!("duplicate parameter {name}")));
            }
            store.params.insert(name, tensor);
        }
        // A well-formed file ends exactly at the last value.
        let mut probe = [0u8; 1];
        match r.read(&mut probe)? {
            0 => Ok(store),
            _ => Err(StoreError::Corrupt("trailing bytes after last tensor".into())),
        }
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32, StoreError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store() -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert("b.weight", Tensor::from_vec(vec![1.5, -2.25, 0.0, 1e-300], &[2, 2]).unwrap().with_grad());
        s.insert("a.bias", Tensor::from_vec(vec![0.5, f64::MIN_POSITIVE, -7.0], &[3]).unwrap().with_grad());
        s.insert("c.scale", Tensor::scalar(3.75).with_grad());
        s
    }

    #[test]
    fn round_trip_preserves_names_shapes_and_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.pfdw");
        let store = sample_store();
        store.save(&path).unwrap();
        let loaded = ParameterStore::load(&path).unwrap();
        assert_eq!(loaded.names(), store.names());
        for (name, t) in store.iter() {
            let l = loaded.expect(name);
            assert_eq!(l.shape(), t.shape());
            let (a, b) = (t.to_vec(), l.to_vec());
            for (x, y) in a.iter().zip(&b) {
                assert_eq!(x.to_bits(), y.to_bits(), "bit mismatch in {name}");
            }
        }
    }

    #[test]
    fn save_is_byte_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("one.pfdw"), dir.path().join("two.pfdw"));
        let store = sample_store();
        store.save(&p1).unwrap();
        store.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn iteration_is_name_ordered() {
        let store = sample_store();
        assert_eq!(store.names(), vec!["a.bias", "b.weight", "c.scale"]);
        assert_eq!(store.param_count(), 3 + 4 + 1);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.pfdw");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00\x00\x00\x00\x00").unwrap();
        assert!(matches!(ParameterStore::load(&path), Err(StoreError::BadMagic(_))));
    }

    #[test]
    fn wrong_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v9.pfdw");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&PFDW_MAGIC);
        bytes.extend_from_slice(&9u32.to_le_bytes());
        bytes.extend_from_slice(&0u32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(ParameterStore::load(&path), Err(StoreError::UnsupportedVersion(9))));
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.pfdw");
        sample_store().save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 5);
        std::fs::write(&path, &bytes).unwrap();
        assert!(ParameterStore::load(&path).is_err());
    }

    #[test]
    fn trailing_garbage_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("extra.pfdw");
        sample_store().save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.push(0xAB);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(ParameterStore::load(&path), Err(StoreError::Corrupt(_))));
    }

    #[test]
    fn grad_norm_and_zeroing() {
        let store = sample_store();
        // 3·a + 4·b where a, b are single parameters: grads are 3 and 4
        let a = store.expect("c.scale");
        let b = store.expect("a.bias");
        let loss = a
            .mul_scalar(3.0)
            .sum_all()
            .add(&b.mul_scalar(4.0).slice(0, 0, 1).unwrap().sum_all())
            .unwrap();
        loss.backward().unwrap();
        let norm = store.grad_global_norm();
        assert!((norm - 5.0).abs() < 1e-12, "expected 5, got {norm}");
        store.zero_grads();
        assert_eq!(store.grad_global_norm(), 0.0);
    }
}
