//! `lorafuse build`: assemble a library from a JSON stub.
//!
//! ```json
//! {
//!   "embedding_dim": 16,
//!   "records": [
//!     {
//!       "domain_id": "d00",
//!       "embeddings": "d00.emb",
//!       "adapter_blob": "d00.bin",
//!       "layers": [{"name": "layer0", "b_shape": [16, 4], "a_shape": [4, 16], "rank": 4, "alpha": 8.0}]
//!     }
//!   ]
//! }
//! ```
//!
//! Paths are relative to the stub. Blobs use the library payload layout.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::Args;
use lorafuse::library::{build_record, decode_adapter, read_embeddings, save, LayerEntry, RecordOptions};
use lorafuse::Library;
use serde::{Deserialize, Serialize};

#[derive(Args, Debug)]
pub struct BuildArgs {
    /// JSON stub listing the records.
    #[arg(long)]
    pub spec: PathBuf,
    /// Output library directory.
    #[arg(long)]
    pub out: PathBuf,
    /// L2-normalise embeddings before taking centroids.
    #[arg(long)]
    pub normalize: bool,
    /// Ridge added to covariance diagonals.
    #[arg(long, default_value_t = 1e-3)]
    pub ridge: f64,
    /// Minimum samples for a Mahalanobis covariance.
    #[arg(long, default_value_t = lorafuse::library::DEFAULT_MIN_COVARIANCE_SAMPLES)]
    pub min_cov_samples: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BuildSpec {
    #[serde(default)]
    pub embedding_dim: Option<usize>,
    pub records: Vec<BuildRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BuildRecord {
    pub domain_id: String,
    pub embeddings: PathBuf,
    #[serde(default)]
    pub adapter_id: Option<String>,
    pub adapter_blob: PathBuf,
    pub layers: Vec<LayerEntry>,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

pub fn run(args: BuildArgs) -> anyhow::Result<()> {
    if !(args.ridge >= 0.0 && args.ridge.is_finite()) {
        return Err(lorafuse::Error::Usage(format!("ridge must be finite and nonnegative, got {}", args.ridge)).into());
    }
    let raw = fs::read(&args.spec).with_context(|| format!("reading {}", args.spec.display()))?;
    let spec: BuildSpec = serde_json::from_slice(&raw).with_context(|| format!("parsing {}", args.spec.display()))?;
    let root = args.spec.parent().unwrap_or(Path::new("."));
    let options = RecordOptions {
        ridge: args.ridge,
        min_covariance_samples: args.min_cov_samples,
        normalize: args.normalize,
    };
    let lib = assemble(&spec, root, &options)?;
    save(&lib, &args.out)?;

    println!("M={} embedding_dim={}", lib.len(), lib.embedding_dim());
    for r in lib.records() {
        println!(
            "{} samples={} covariance={}",
            r.domain_id(),
            r.sample_count(),
            if r.mahalanobis_eligible() { "yes" } else { "no" }
        );
    }
    println!("digest={}", lib.digest());
    Ok(())
}

fn assemble(spec: &BuildSpec, root: &Path, options: &RecordOptions) -> anyhow::Result<Library> {
    if spec.records.is_empty() {
        return Err(lorafuse::Error::Usage("the build stub lists no records".into()).into());
    }
    let mut lib: Option<Library> = spec.embedding_dim.map(Library::new);
    for rec in &spec.records {
        let embeddings = read_embeddings(root.join(&rec.embeddings))?;
        let blob_path = root.join(&rec.adapter_blob);
        let payload = fs::read(&blob_path).map_err(|e| lorafuse::Error::Io {
            path: blob_path.clone(),
            source: e,
        })?;
        let adapter_id = rec.adapter_id.as_deref().unwrap_or(&rec.domain_id);
        let mut adapter = decode_adapter(adapter_id, &rec.layers, &payload)
            .with_context(|| format!("domain `{}`", rec.domain_id))?;
        adapter.metadata.insert("source_blob".into(), rec.adapter_blob.display().to_string());
        let mut record = build_record(rec.domain_id.clone(), &embeddings, adapter, options)
            .with_context(|| format!("domain `{}`", rec.domain_id))?;
        record.metadata = rec.metadata.clone();
        let current = lib.take().unwrap_or_else(|| Library::new(record.centroid().dim()));
        lib = Some(current.extend(record)?);
    }
    Ok(lib.expect("at least one record"))
}
