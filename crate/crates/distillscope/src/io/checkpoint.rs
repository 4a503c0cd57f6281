//! Binary checkpoint format.
//!
//! Layout: 4-byte magic `KDVC` | u32 LE version | u32 LE header length |
//! JSON header | raw little-endian f32 blobs in manifest order. The header
//! declares the total file length and per-parameter byte offsets, so a
//! round trip is byte-identical and truncation is detectable.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, StudentConfig, Student, Teacher, TeacherConfig};
use crate::tensor::rng::Rng;
use crate::tensor::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"KDVC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: u64,
    pub seed: u64,
    /// Free-form metrics snapshot (e.g. best validation loss/accuracy).
    pub metrics: serde_json::Value,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "model_kind", content = "model_config", rename_all = "snake_case")]
enum ModelSection {
    Teacher(TeacherConfig),
    Student(StudentConfig),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    /// Byte offset into the blob section.
    offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    #[serde(flatten)]
    model: ModelSection,
    epoch: u64,
    seed: u64,
    metrics: serde_json::Value,
    total_len: u64,
    manifest: Vec<ManifestEntry>,
}

pub fn save_checkpoint<F: Scalar>(
    model: &Model<F>,
    meta: &CheckpointMeta,
    path: &Path,
) -> Result<()> {
    let section = match model {
        Model::Teacher(t) => ModelSection::Teacher(t.config.clone()),
        Model::Student(s) => ModelSection::Student(s.config.clone()),
    };
    let mut manifest = Vec::new();
    let mut blobs: Vec<u8> = Vec::new();
    for (name, tensor) in model.params().iter() {
        manifest.push(ManifestEntry {
            name: name.to_string(),
            shape: tensor.shape(),
            dtype: "f32".to_string(),
            offset: blobs.len() as u64,
        });
        for v in tensor.to_vec() {
            blobs.extend_from_slice(&(v.f64() as f32).to_le_bytes());
        }
    }
    let mut header = Header {
        model: section,
        epoch: meta.epoch,
        seed: meta.seed,
        metrics: meta.metrics.clone(),
        total_len: 0,
        manifest,
    };
    // Serialize once to learn the header size, then fix up total_len;
    // the length of its decimal rendering can change the header size, so
    // iterate until stable.
    let mut header_bytes = serde_json::to_vec(&header)?;
    loop {
        let total = (12 + header_bytes.len() + blobs.len()) as u64;
        if header.total_len == total {
            break;
        }
        header.total_len = total;
        header_bytes = serde_json::to_vec(&header)?;
    }
    let mut out = Vec::with_capacity(header.total_len as usize);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    out.extend_from_slice(&blobs);
    fs::write(path, out)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Model<f32>, CheckpointMeta)> {
    let bytes = fs::read(path)?;
    if bytes.len() < 12 {
        return Err(Error::Truncated(format!(
            "file is only {} bytes",
            bytes.len()
        )));
    }
    if &bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic);
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::BadVersion(version));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() < 12 + header_len {
        return Err(Error::Truncated("header extends past end of file".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[12..12 + header_len])?;
    if header.total_len != bytes.len() as u64 {
        return Err(Error::Truncated(format!(
            "header declares {} bytes but the file has {}",
            header.total_len,
            bytes.len()
        )));
    }
    let blobs = &bytes[12 + header_len..];

    // Rebuild the model skeleton, then overwrite every parameter from the
    // manifest. The build-time RNG is irrelevant: all values are replaced.
    let model: Model<f32> = match &header.model {
        ModelSection::Teacher(cfg) => Model::Teacher(Teacher::build(cfg, &mut Rng::new(0, 0))?),
        ModelSection::Student(cfg) => Model::Student(Student::build(cfg, &mut Rng::new(0, 0))?),
    };
    let params = model.params();
    if params.len() != header.manifest.len() {
        return Err(Error::ManifestMismatch(format!(
            "model has {} parameters, manifest lists {}",
            params.len(),
            header.manifest.len()
        )));
    }
    let mut expected_offset = 0u64;
    for ((name, tensor), entry) in params.iter().zip(&header.manifest) {
        if entry.name != name {
            return Err(Error::ManifestMismatch(format!(
                "expected parameter '{name}', manifest has '{}'",
                entry.name
            )));
        }
        if entry.shape != tensor.shape() {
            return Err(Error::ManifestMismatch(format!(
                "parameter '{name}' has shape {:?}, manifest declares {:?}",
                tensor.shape(),
                entry.shape
            )));
        }
        if entry.dtype != "f32" {
            return Err(Error::ManifestMismatch(format!(
                "parameter '{name}' has unsupported dtype '{}'",
                entry.dtype
            )));
        }
        if entry.offset != expected_offset {
            return Err(Error::ManifestMismatch(format!(
                "parameter '{name}' at offset {}, expected {} (blobs must be contiguous)",
                entry.offset, expected_offset
            )));
        }
        let n = tensor.len();
        let start = entry.offset as usize;
        let end = start + 4 * n;
        if end > blobs.len() {
            return Err(Error::Truncated(format!(
                "blob for '{name}' extends past end of file"
            )));
        }
        tensor.with_data_mut(|d| {
            for (j, v) in d.iter_mut().enumerate() {
                let o = start + 4 * j;
                *v = f32::from_le_bytes(blobs[o..o + 4].try_into().unwrap());
            }
        });
        expected_offset = end as u64;
    }
    if expected_offset != blobs.len() as u64 {
        return Err(Error::Truncated(format!(
            "{} trailing bytes after the last blob",
            blobs.len() as u64 - expected_offset
        )));
    }
    let meta = CheckpointMeta {
        epoch: header.epoch,
        seed: header.seed,
        metrics: header.metrics,
    };
    Ok((model, meta))
}
