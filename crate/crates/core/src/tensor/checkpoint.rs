//! Flat binary container of named `f64` arrays.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"HDVCKPT1"              8-byte magic
//! u64                      header length in bytes
//! JSON header              {"tensors":[{"name":..,"shape":[..],"offset":..}, ..]}
//! f64 data                 concatenated arrays; `offset` is in bytes from
//!                          the start of this section
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"HDVCKPT1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IndexEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    tensors: Vec<IndexEntry>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<(String, Vec<usize>, Vec<f64>)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends (or replaces) a named array.
    pub fn push(&mut self, name: &str, shape: &[usize], data: Vec<f64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        if let Some(e) = self.entries.iter_mut().find(|e| e.0 == name) {
            *e = (name.to_string(), shape.to_vec(), data);
        } else {
            self.entries.push((name.to_string(), shape.to_vec(), data));
        }
    }

    pub fn get(&self, name: &str) -> Option<(&[usize], &[f64])> {
        self.entries
            .iter()
            .find(|e| e.0 == name)
            .map(|(_, s, d)| (s.as_slice(), d.as_slice()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.0.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Merges all entries of `other` (later entries win).
    pub fn extend(&mut self, other: &Checkpoint) {
        for (n, s, d) in &other.entries {
            self.push(n, s, d.clone());
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0u64;
        let tensors = self
            .entries
            .iter()
            .map(|(name, shape, data)| {
                let e = IndexEntry {
                    name: name.clone(),
                    shape: shape.clone(),
                    offset,
                };
                offset += 8 * data.len() as u64;
                e
            })
            .collect();
        let header = serde_json::to_vec(&Header { tensors }).expect("header serializes");
        let mut out = Vec::with_capacity(16 + header.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, _, data) in &self.entries {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let data_start = 16usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("header length {hlen} exceeds file")))?;
        let header: Header = serde_json::from_slice(&bytes[16..data_start])
            .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let data = &bytes[data_start..];
        let mut entries = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + 8 * n;
            if end > data.len() {
                return Err(Error::Checkpoint(format!(
                    "`{}` spans bytes {start}..{end} but data section has {}",
                    e.name,
                    data.len()
                )));
            }
            let values = data[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            entries.push((e.name, e.shape, values));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(values in proptest::collection::vec(any::<f64>(), 1..40), split in 1usize..6) {
            let mut ck = Checkpoint::new();
            let cut = (values.len() / split).max(1);
            ck.push("a.weight", &[cut], values[..cut].to_vec());
            if cut < values.len() {
                ck.push("b", &[values.len() - cut, 1], values[cut..].to_vec());
            }
            let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
            prop_assert_eq!(back.len(), ck.len());
            for name in ck.names() {
                let (s1, d1) = ck.get(name).unwrap();
                let (s2, d2) = back.get(name).unwrap();
                prop_assert_eq!(s1, s2);
                let b1: Vec<u64> = d1.iter().map(|v| v.to_bits()).collect();
                let b2: Vec<u64> = d2.iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(b1, b2);
            }
        }
    }

    #[test]
    fn truncated_file_is_rejected() {
        let mut ck = Checkpoint::new();
        ck.push("w", &[4], vec![1.0, 2.0, 3.0, 4.0]);
        let bytes = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(Checkpoint::from_bytes(b"nonsense").is_err());
    }
}
