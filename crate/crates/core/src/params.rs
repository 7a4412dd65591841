//! Named parameter tensors and the binary checkpoint format.
//!
//! Checkpoint layout (little-endian): magic `GTCK1`, `u32` tensor count, then
//! for each tensor `u32` name length, name bytes, `u32` rank, `rank × u32`
//! dims, and the `f32` payload in row-major order.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::Mat;

const CHECKPOINT_MAGIC: &[u8; 5] = b"GTCK1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    entries: Vec<(String, Mat)>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a tensor; panics on duplicate names.
    pub fn insert(&mut self, name: impl Into<String>, value: Mat) {
        let name = name.into();
        assert!(self.index_of(&name).is_none(), "duplicate parameter {name}");
        self.entries.push((name, value));
    }

    fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.index_of(name).map(|i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.index_of(name).map(move |i| &mut self.entries[i].1)
    }

    pub fn require(&self, name: &str) -> Result<&Mat> {
        self.get(name)
            .ok_or_else(|| Error::CheckpointMismatch(format!("missing tensor `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.entries.iter().map(|(n, m)| (n.as_str(), m))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Mat)> {
        self.entries.iter_mut().map(|(n, m)| (n.as_str(), m))
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|(n, _)| n.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.entries.iter().map(|(_, m)| m.len()).sum()
    }

    /// Rounds every entry through `f32`, matching what a checkpoint stores.
    pub fn round_to_f32(&mut self) {
        for (_, m) in &mut self.entries {
            m.mapv_inplace(|v| v as f32 as f64);
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, m) in &self.entries {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&2u32.to_le_bytes());
            buf.extend_from_slice(&(m.nrows() as u32).to_le_bytes());
            buf.extend_from_slice(&(m.ncols() as u32).to_le_bytes());
            for v in m.iter() {
                buf.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(5)? != CHECKPOINT_MAGIC {
            return Err(bad("missing GTCK1 header"));
        }
        let count = cur.u32()? as usize;
        let mut store = ParameterStore::new();
        for _ in 0..count {
            let len = cur.u32()? as usize;
            let name = String::from_utf8(cur.take(len)?.to_vec()).map_err(|_| bad("tensor name is not UTF-8"))?;
            let rank = cur.u32()? as usize;
            let dims: Vec<usize> = (0..rank).map(|_| cur.u32().map(|d| d as usize)).collect::<Result<_>>()?;
            let shape = match dims.as_slice() {
                [] => (1, 1),
                [c] => (1, *c),
                [r, c] => (*r, *c),
                _ => return Err(bad(&format!("tensor `{name}` has unsupported rank {rank}"))),
            };
            let payload = cur.take(4 * shape.0 * shape.1)?;
            let values = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            if store.get(&name).is_some() {
                return Err(bad(&format!("duplicate tensor `{name}`")));
            }
            store.insert(name, Mat::from_shape_vec(shape, values).unwrap());
        }
        if cur.pos != bytes.len() {
            return Err(bad("trailing bytes after last tensor"));
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn bad(detail: &str) -> Error {
    Error::Format {
        what: "checkpoint",
        detail: detail.to_string(),
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| bad("truncated"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Glorot-uniform initialization: `U(±sqrt(6 / (fan_in + fan_out)))`.
pub fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Mat {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Mat::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-bound..bound))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;

    #[test]
    fn glorot_respects_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = glorot(&mut rng, 10, 6);
        let bound = (6.0f64 / 16.0).sqrt();
        assert!(m.iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn truncated_and_trailing_bytes_are_rejected() {
        let mut store = ParameterStore::new();
        store.insert("a", Mat::ones((2, 3)));
        let bytes = store.to_bytes();
        assert!(ParameterStore::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(ParameterStore::from_bytes(&extra).is_err());
        assert!(ParameterStore::from_bytes(b"GTCK2\0\0\0\0").is_err());
    }

    #[test]
    fn rank_one_tensors_load_as_rows() {
        let mut bytes = b"GTCK1".to_vec();
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.push(b'w');
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&1.5f32.to_le_bytes());
        bytes.extend_from_slice(&(-2.0f32).to_le_bytes());
        let store = ParameterStore::from_bytes(&bytes).unwrap();
        assert_eq!(store.get("w").unwrap(), &Mat::from_shape_vec((1, 2), vec![1.5, -2.0]).unwrap());
    }

    proptest! {
        #[test]
        fn checkpoint_round_trip_is_f32_exact(vals in proptest::collection::vec(-1e6f64..1e6, 1..40), split in 1usize..5) {
            let cols = vals.len().div_ceil(split);
            let mut padded = vals.clone();
            padded.resize(split * cols, 0.25);
            let mut store = ParameterStore::new();
            store.insert("layer.w", Mat::from_shape_vec((split, cols), padded).unwrap());
            store.insert("layer.b", Mat::zeros((1, 3)));
            let mut expected = store.clone();
            expected.round_to_f32();
            let back = ParameterStore::from_bytes(&store.to_bytes()).unwrap();
            prop_assert_eq!(back, expected);
        }
    }
}
