//! Directory-based persistence: `manifest.json` plus one little-endian blob per adapter.
//!
//! Adapter blobs hold `f32` values, row-major, layers in manifest order with
//! `B` written before `A`. Covariances (when present) go to their own `f64`
//! blob. Every blob carries a CRC32 in the manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Covariance, DomainRecord, Embedding, Library, StoredAdapter, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::tensor::{AdapterSet, LoraPair, Matrix};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub embedding_dim: usize,
    pub records: Vec<RecordEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordEntry {
    pub domain_id: String,
    pub sample_count: usize,
    pub centroid: Vec<f64>,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
    pub adapter_id: String,
    #[serde(default)]
    pub adapter_metadata: BTreeMap<String, String>,
    pub layers: Vec<LayerEntry>,
    pub adapter_blob: BlobEntry,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariance_blob: Option<BlobEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub name: String,
    /// `[d, r]`
    pub b_shape: [usize; 2],
    /// `[r, k]`
    pub a_shape: [usize; 2],
    pub rank: usize,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobEntry {
    pub file: String,
    pub bytes: usize,
    pub crc32: u32,
}

impl BlobEntry {
    fn for_payload(file: String, payload: &[u8]) -> Self {
        Self {
            file,
            bytes: payload.len(),
            crc32: crc32fast::hash(payload),
        }
    }
}

impl LayerEntry {
    pub fn from_pair(p: &LoraPair<f32>) -> Self {
        Self {
            name: p.layer_name().to_owned(),
            b_shape: [p.b().rows(), p.b().cols()],
            a_shape: [p.a().rows(), p.a().cols()],
            rank: p.rank(),
            alpha: p.alpha(),
        }
    }

    fn payload_len(&self) -> usize {
        (self.b_shape[0] * self.b_shape[1] + self.a_shape[0] * self.a_shape[1]) * 4
    }
}

/// Serialises an adapter's factors in blob order.
pub fn adapter_payload(adapter: &StoredAdapter) -> Vec<u8> {
    let mut out = Vec::new();
    for p in adapter.layers() {
        for v in p.b().data().iter().chain(p.a().data()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Rebuilds an adapter from a layer table and a blob already length/CRC-checked.
pub fn decode_adapter(adapter_id: &str, layers: &[LayerEntry], payload: &[u8]) -> Result<StoredAdapter> {
    let expected: usize = layers.iter().map(LayerEntry::payload_len).sum();
    if payload.len() != expected {
        return Err(Error::Truncated {
            blob: adapter_id.to_owned(),
            expected,
            found: payload.len(),
        });
    }
    let mut floats = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
    let mut take = |n: usize| floats.by_ref().take(n).collect::<Vec<_>>();
    let pairs = layers
        .iter()
        .map(|l| {
            if l.b_shape[1] != l.rank || l.a_shape[0] != l.rank {
                return Err(Error::structural(format!(
                    "layer `{}`: shapes {:?}/{:?} disagree with rank {}",
                    l.name, l.b_shape, l.a_shape, l.rank
                )));
            }
            let b = Matrix::new(l.b_shape[0], l.b_shape[1], take(l.b_shape[0] * l.b_shape[1]))?;
            let a = Matrix::new(l.a_shape[0], l.a_shape[1], take(l.a_shape[0] * l.a_shape[1]))?;
            LoraPair::new(l.name.clone(), b, a, l.alpha)
        })
        .collect::<Result<Vec<_>>>()?;
    AdapterSet::new(adapter_id, pairs)
}

fn blob_name(index: usize, kind: &str) -> String {
    format!("{kind}-{index:04}.bin")
}

/// Writes `lib` into `dir`, creating the directory if needed. The manifest is written last.
pub fn save(lib: &Library, dir: impl AsRef<Path>) -> Result<Manifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(lib.len());
    for (i, r) in lib.records.iter().enumerate() {
        let adapter = r.adapter();
        let payload = adapter_payload(adapter);
        let adapter_blob = BlobEntry::for_payload(blob_name(i, "adapter"), &payload);
        let path = dir.join(&adapter_blob.file);
        fs::write(&path, &payload).map_err(|e| Error::io(path, e))?;

        let covariance_blob = match r.covariance() {
            Some(cov) => {
                let bytes: Vec<u8> = cov.matrix().data().iter().flat_map(|v| v.to_le_bytes()).collect();
                let entry = BlobEntry::for_payload(blob_name(i, "covariance"), &bytes);
                let path = dir.join(&entry.file);
                fs::write(&path, &bytes).map_err(|e| Error::io(path, e))?;
                Some(entry)
            }
            None => None,
        };

        entries.push(RecordEntry {
            domain_id: r.domain_id().to_owned(),
            sample_count: r.sample_count(),
            centroid: r.centroid().values().to_vec(),
            metadata: r.metadata.clone(),
            adapter_id: adapter.adapter_id().to_owned(),
            adapter_metadata: adapter.metadata.clone(),
            layers: adapter.layers().map(LayerEntry::from_pair).collect(),
            adapter_blob,
            covariance_blob,
        });
    }
    let manifest = Manifest {
        format_version: lib.format_version(),
        embedding_dim: lib.embedding_dim(),
        records: entries,
    };
    let json = serde_json::to_vec_pretty(&manifest).map_err(|source| Error::Json {
        context: "serialising manifest".into(),
        source,
    })?;
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, json).map_err(|e| Error::io(path, e))?;
    Ok(manifest)
}

fn read_blob(dir: &Path, entry: &BlobEntry) -> Result<Vec<u8>> {
    let path = dir.join(&entry.file);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if bytes.len() != entry.bytes {
        return Err(Error::Truncated {
            blob: entry.file.clone(),
            expected: entry.bytes,
            found: bytes.len(),
        });
    }
    let crc = crc32fast::hash(&bytes);
    if crc != entry.crc32 {
        return Err(Error::Checksum {
            blob: entry.file.clone(),
            expected: entry.crc32,
            found: crc,
        });
    }
    Ok(bytes)
}

pub fn load(dir: impl AsRef<Path>) -> Result<Library> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST_FILE);
    let raw = fs::read(&path).map_err(|e| Error::io(&path, e))?;

    // Check the version before committing to the full schema so a future
    // layout still yields a version error rather than a parse error.
    #[derive(Deserialize)]
    struct VersionProbe {
        format_version: u32,
    }
    let probe: VersionProbe = serde_json::from_slice(&raw).map_err(|source| Error::Json {
        context: path.display().to_string(),
        source,
    })?;
    if probe.format_version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: probe.format_version,
            supported: FORMAT_VERSION,
        });
    }
    let manifest: Manifest = serde_json::from_slice(&raw).map_err(|source| Error::Json {
        context: path.display().to_string(),
        source,
    })?;

    let mut lib = Library::new(manifest.embedding_dim);
    for entry in &manifest.records {
        let payload = read_blob(dir, &entry.adapter_blob)?;
        let mut adapter = decode_adapter(&entry.adapter_id, &entry.layers, &payload).map_err(|e| match e {
            Error::Truncated { expected, found, .. } => Error::Truncated {
                blob: entry.adapter_blob.file.clone(),
                expected,
                found,
            },
            other => other,
        })?;
        adapter.metadata = entry.adapter_metadata.clone();

        let covariance = match &entry.covariance_blob {
            Some(blob) => {
                let bytes = read_blob(dir, blob)?;
                let dim = manifest.embedding_dim;
                if bytes.len() != dim * dim * 8 {
                    return Err(Error::Truncated {
                        blob: blob.file.clone(),
                        expected: dim * dim * 8,
                        found: bytes.len(),
                    });
                }
                let data = bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                    .collect();
                Some(Covariance::new(Matrix::new(dim, dim, data)?)?)
            }
            None => None,
        };

        let mut record = DomainRecord::new(
            entry.domain_id.clone(),
            Embedding::new(entry.centroid.clone())?,
            entry.sample_count,
            adapter,
            covariance,
        )?;
        record.metadata = entry.metadata.clone();
        lib = lib.extend(record)?;
    }
    Ok(lib)
}
