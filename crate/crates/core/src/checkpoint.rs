//! Binary checkpoint format.
//!
//! ```text
//! b"SOFTSLOT" | version: u32 LE | manifest length: u64 LE | manifest JSON | blob
//! ```
//!
//! The blob holds every tensor as little-endian `f32`, row-major, in manifest
//! order. The manifest records each tensor's byte offset and length within
//! the blob and a SHA-256 of the whole blob.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use softslot_numerics::{ParamStore, Tensor};

use crate::error::{CoreError, Result};

pub const MAGIC: &[u8; 8] = b"SOFTSLOT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
    pub frozen: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SectionEntry {
    pub name: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub seed: u64,
    pub config: serde_json::Value,
    pub checksum: String,
    pub sections: Vec<SectionEntry>,
}

/// A named parameter store plus free-form metadata (vocabularies, dims).
#[derive(Clone, Debug)]
pub struct Section {
    pub name: String,
    pub meta: serde_json::Value,
    pub params: ParamStore,
}

impl Section {
    pub fn new(name: &str, meta: serde_json::Value, params: ParamStore) -> Self {
        Section {
            name: name.to_string(),
            meta,
            params,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub sections: Vec<Section>,
}

impl Checkpoint {
    pub fn section(&self, name: &str) -> Result<&Section> {
        self.sections
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| CoreError::Protocol(format!("checkpoint has no loaded section {name:?}")))
    }

    pub fn take(&mut self, name: &str) -> Result<Section> {
        let i = self
            .sections
            .iter()
            .position(|s| s.name == name)
            .ok_or_else(|| CoreError::Protocol(format!("checkpoint has no loaded section {name:?}")))?;
        Ok(self.sections.remove(i))
    }
}

/// Serializes sections to bytes.
pub fn encode(seed: u64, config: &serde_json::Value, sections: &[Section]) -> Result<Vec<u8>> {
    let mut blob = Vec::new();
    let mut entries = Vec::new();
    for s in sections {
        let mut tensors = Vec::new();
        for (name, t) in s.params.iter() {
            if !t.all_finite() {
                return Err(CoreError::NonFinite {
                    term: name.to_string(),
                    context: format!("checkpoint section {}", s.name),
                });
            }
            let offset = blob.len() as u64;
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            tensors.push(TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset,
                length: blob.len() as u64 - offset,
                frozen: s.params.is_frozen(name),
            });
        }
        entries.push(SectionEntry {
            name: s.name.clone(),
            meta: s.meta.clone(),
            tensors,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        seed,
        config: config.clone(),
        checksum: hex::encode(Sha256::digest(&blob)),
        sections: entries,
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(20 + json.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    Ok(out)
}

pub fn save_checkpoint(path: &Path, seed: u64, config: &serde_json::Value, sections: &[Section]) -> Result<()> {
    let bytes = encode(seed, config, sections)?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| CoreError::io(path, e))
}

/// Parses bytes; `only` restricts which sections are materialized.
pub fn decode(path: &Path, bytes: &[u8], only: Option<&[&str]>) -> Result<Checkpoint> {
    let corrupt = |reason: &str| CoreError::CorruptCheckpoint {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(corrupt("bad magic or truncated header"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(CoreError::UnsupportedVersion {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let mlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = &bytes[20..];
    if mlen > body.len() {
        return Err(corrupt("truncated manifest"));
    }
    let manifest: Manifest =
        serde_json::from_slice(&body[..mlen]).map_err(|e| corrupt(&format!("manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(CoreError::UnsupportedVersion {
            found: manifest.format_version,
            expected: FORMAT_VERSION,
        });
    }
    let blob = &body[mlen..];
    if hex::encode(Sha256::digest(blob)) != manifest.checksum {
        return Err(corrupt("blob checksum mismatch"));
    }
    if let Some(names) = only {
        for n in names {
            if !manifest.sections.iter().any(|s| s.name == *n) {
                return Err(corrupt(&format!("no section named {n:?}")));
            }
        }
    }
    let mut sections = Vec::new();
    for s in &manifest.sections {
        if only.is_some_and(|names| !names.contains(&s.name.as_str())) {
            continue;
        }
        let mut params = ParamStore::new();
        for t in &s.tensors {
            let (start, end) = (t.offset as usize, (t.offset + t.length) as usize);
            let numel: usize = t.shape.iter().product();
            if end > blob.len() || end < start || t.length as usize != numel * 4 {
                return Err(corrupt(&format!("tensor {} out of bounds", t.name)));
            }
            let data = blob[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            params.insert(t.name.clone(), Tensor::new(t.shape.clone(), data)?)?;
            if t.frozen {
                params.freeze(&t.name)?;
            }
        }
        sections.push(Section {
            name: s.name.clone(),
            meta: s.meta.clone(),
            params,
        });
    }
    Ok(Checkpoint { manifest, sections })
}

/// Loads a checkpoint. A missing file is reported as
/// [`CoreError::MissingCheckpoint`] naming `stage`.
pub fn load_checkpoint(path: &Path, only: Option<&[&str]>, stage: &'static str) -> Result<Checkpoint> {
    let bytes = match std::fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(CoreError::MissingCheckpoint {
                path: path.to_path_buf(),
                stage,
            })
        }
        Err(e) => return Err(CoreError::io(path, e)),
    };
    decode(path, &bytes, only)
}
