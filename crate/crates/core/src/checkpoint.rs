//! Named-tensor checkpoints.
//!
//! ```text
//! "MFCK" | version u32 | entry count u32
//! per entry: name length u32 | UTF-8 name | rank u32 | rank × u64 extents
//!            | numel × f64 payload
//! ```
//!
//! Little-endian throughout. Entries appear in module visiting order and
//! include non-trainable buffers such as batch-norm running statistics.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::layers::Module;
use crate::tensor::Float;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MFCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub fn encode<T: Float>(model: &impl Module<T>) -> Vec<u8> {
    let tensors = model.named_tensors("");
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for nt in &tensors {
        out.extend_from_slice(&(nt.name.len() as u32).to_le_bytes());
        out.extend_from_slice(nt.name.as_bytes());
        out.extend_from_slice(&(nt.tensor.rank() as u32).to_le_bytes());
        for &e in nt.tensor.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for v in nt.tensor.to_f64_vec() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format("checkpoint", format!("truncated at byte {}", self.at)))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Entry>> {
    let bad = |reason: String| Error::format("checkpoint", reason);
    let mut r = Reader { bytes, at: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(bad("missing MFCK magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| bad(e.to_string()))?
            .to_owned();
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| bad(format!("extent overflow in {name}")))?;
        let data = r
            .take(numel.checked_mul(8).ok_or_else(|| bad("payload overflow".into()))?)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push(Entry { name, shape, data });
    }
    if r.at != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - r.at)));
    }
    Ok(entries)
}

/// Copies stored values into `model`. Every tensor of the model must be
/// present with a matching shape, and no unknown entries are allowed.
pub fn restore<T: Float>(model: &impl Module<T>, entries: Vec<Entry>) -> Result<()> {
    let mut by_name: BTreeMap<String, Entry> = BTreeMap::new();
    for e in entries {
        if by_name.contains_key(&e.name) {
            return Err(Error::format("checkpoint", format!("duplicate entry {}", e.name)));
        }
        by_name.insert(e.name.clone(), e);
    }
    for nt in model.named_tensors("") {
        let entry = by_name
            .remove(&nt.name)
            .ok_or_else(|| Error::format("checkpoint", format!("missing entry {}", nt.name)))?;
        if entry.shape != nt.tensor.shape() {
            return Err(Error::format(
                "checkpoint",
                format!("{}: stored shape {:?}, model expects {:?}", nt.name, entry.shape, nt.tensor.shape()),
            ));
        }
        nt.tensor.set_data(entry.data.into_iter().map(T::lit).collect())?;
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(Error::format("checkpoint", format!("unexpected entry {extra}")));
    }
    Ok(())
}

pub fn save<T: Float>(path: &Path, model: &impl Module<T>) -> Result<()> {
    write_atomic(path, &encode(model))
}

pub fn load<T: Float>(path: &Path, model: &impl Module<T>) -> Result<()> {
    restore(model, decode(&fs::read(path)?)?)
}
