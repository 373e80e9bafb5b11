//! On-disk volume container and dataset manifest.
//!
//! A volume file holds one labeled multi-modal sample:
//!
//! ```text
//! "MFVL" | version u32 | M u32 | C u32 | D u32 | H u32 | W u32 | label u32
//! payload: M·C·D·H·W × f32, (M, C, D, H, W) row-major
//! ```
//!
//! All integers and floats are little-endian. A dataset is a directory of
//! such files plus a UTF-8 `manifest.txt`:
//!
//! ```text
//! modalfuse-manifest 1
//! classes <num_classes>
//! <file name> <train|test|any>
//! ...
//! ```

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array5, ArrayView5};

use super::VolumeBatch;
use crate::error::{Error, Result};
use crate::io::write_atomic;

pub const VOLUME_MAGIC: &[u8; 4] = b"MFVL";
pub const VOLUME_VERSION: u32 = 1;
pub const MANIFEST_NAME: &str = "manifest.txt";
const MANIFEST_HEADER: &str = "modalfuse-manifest 1";
const HEADER_LEN: usize = 4 + 4 * 7;

/// Split assignment of a stored sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
    /// Left to the experiment protocol's random split.
    Any,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Any => "any",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "any" => Ok(Split::Any),
            other => Err(Error::format("manifest", format!("unknown split {other:?}"))),
        }
    }
}

pub fn encode_volume(sample: ArrayView5<'_, f32>, label: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * sample.len());
    out.extend_from_slice(VOLUME_MAGIC);
    out.extend_from_slice(&VOLUME_VERSION.to_le_bytes());
    for &extent in sample.shape() {
        out.extend_from_slice(&(extent as u32).to_le_bytes());
    }
    out.extend_from_slice(&(label as u32).to_le_bytes());
    for &v in sample.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_volume(bytes: &[u8]) -> Result<(Array5<f32>, usize)> {
    let bad = |reason: String| Error::format("volume", reason);
    if bytes.len() < HEADER_LEN {
        return Err(bad(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[..4] != VOLUME_MAGIC {
        return Err(bad("missing MFVL magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    if word(0) != VOLUME_VERSION {
        return Err(bad(format!("unsupported version {}", word(0))));
    }
    let dims: Vec<usize> = (1..=5).map(|i| word(i) as usize).collect();
    let label = word(6) as usize;
    let count: usize = dims.iter().product();
    if dims.contains(&0) {
        return Err(bad(format!("zero extent in {dims:?}")));
    }
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != 4 * count {
        return Err(bad(format!(
            "payload holds {} bytes, extents {dims:?} need {}",
            payload.len(),
            4 * count
        )));
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let array = Array5::from_shape_vec((dims[0], dims[1], dims[2], dims[3], dims[4]), data)
        .map_err(|e| bad(e.to_string()))?;
    Ok((array, label))
}

/// A dataset read back from disk.
#[derive(Debug, Clone)]
pub struct StoredDataset {
    pub batch: VolumeBatch,
    pub splits: Vec<Split>,
}

pub fn sample_file_name(index: usize) -> String {
    format!("sample_{index:06}.mfvl")
}

/// Writes every sample of `batch` plus the manifest into `dir`.
pub fn save_dataset(dir: &Path, batch: &VolumeBatch, splits: Option<&[Split]>) -> Result<()> {
    if let Some(s) = splits {
        if s.len() != batch.len() {
            return Err(Error::shape("save_dataset", &[batch.len()], &[s.len()]));
        }
    }
    fs::create_dir_all(dir)?;
    let mut manifest = format!("{MANIFEST_HEADER}\nclasses {}\n", batch.num_classes);
    for i in 0..batch.len() {
        let name = sample_file_name(i);
        write_atomic(&dir.join(&name), &encode_volume(batch.sample(i), batch.labels[i]))?;
        let split = splits.map_or(Split::Any, |s| s[i]);
        manifest.push_str(&format!("{name} {split}\n"));
    }
    write_atomic(&dir.join(MANIFEST_NAME), manifest.as_bytes())
}

pub fn load_dataset(dir: &Path) -> Result<StoredDataset> {
    let text = fs::read_to_string(dir.join(MANIFEST_NAME))?;
    let bad = |reason: String| Error::format("manifest", reason);
    let mut lines = text.lines();
    if lines.next() != Some(MANIFEST_HEADER) {
        return Err(bad("missing header line".into()));
    }
    let num_classes = lines
        .next()
        .and_then(|l| l.strip_prefix("classes "))
        .and_then(|v| v.trim().parse::<usize>().ok())
        .ok_or_else(|| bad("missing `classes <n>` line".into()))?;
    let mut samples = Vec::new();
    let mut labels = Vec::new();
    let mut splits = Vec::new();
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let (name, split) = line
            .rsplit_once(' ')
            .ok_or_else(|| bad(format!("malformed entry {line:?}")))?;
        let (array, label) = decode_volume(&fs::read(dir.join(name))?)?;
        samples.push(array);
        labels.push(label);
        splits.push(split.parse()?);
    }
    let batch = VolumeBatch::from_samples(&samples, labels, num_classes)?;
    Ok(StoredDataset { batch, splits })
}
