//! Binary checkpoint format.
//!
//! ```text
//! magic     8 bytes   "BICAMRL\0"
//! version   u32 LE
//! config    u32 LE length, then UTF-8 JSON (CheckpointMeta)
//! count     u32 LE
//! record*   u32 name length, name, u32 rank, rank × u64 dims, f64 LE payload
//! checksum  u64 LE over every payload byte, in record order
//! ```
//!
//! Language tensors are named `lm.*`, supervisor tensors `doppel.*`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::doppel::DoppelConfig;
use crate::error::{Error, Result};
use crate::language::LMConfig;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"BICAMRL\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub lm: LMConfig,
    #[serde(default)]
    pub doppel: Option<DoppelConfig>,
    pub language_frozen: bool,
    /// Language parameter checksum recorded at freeze time.
    #[serde(default)]
    pub language_checksum: Option<u64>,
    #[serde(default)]
    pub alphabet: Option<Vec<char>>,
    /// Run configuration that produced this checkpoint, verbatim.
    #[serde(default)]
    pub run_config: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Tensor)>,
}

/// First eight bytes (LE) of SHA-256 over the little-endian payloads.
pub fn payload_checksum<'a>(tensors: impl IntoIterator<Item = &'a Tensor>) -> u64 {
    let mut h = Sha256::new();
    for t in tensors {
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Tensors whose name starts with `prefix.`, in stored order.
    pub fn section<'a>(
        &'a self,
        prefix: &'a str,
    ) -> impl Iterator<Item = &'a (String, Tensor)> + 'a {
        self.tensors
            .iter()
            .filter(move |(n, _)| n.strip_prefix(prefix).is_some_and(|r| r.starts_with('.')))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let config = serde_json::to_vec(&self.meta)?;
        out.extend_from_slice(&(config.len() as u32).to_le_bytes());
        out.extend_from_slice(&config);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&t.to_le_bytes());
        }
        let sum = payload_checksum(self.tensors.iter().map(|(_, t)| t));
        out.extend_from_slice(&sum.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let config_len = r.u32()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(config_len)?)?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|e| Error::Checkpoint(format!("tensor name: {e}")))?
                .to_string();
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let payload = r.take(
                n.checked_mul(8)
                    .ok_or_else(|| Error::Checkpoint("tensor too large".into()))?,
            )?;
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        let stored = r.u64()?;
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after checksum".into()));
        }
        let actual = payload_checksum(tensors.iter().map(|(_, t)| t));
        if stored != actual {
            return Err(Error::Checkpoint(format!(
                "payload checksum mismatch: stored {stored:016x}, computed {actual:016x}"
            )));
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
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
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}
