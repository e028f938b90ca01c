//! `lorafuse synth`: trains the synthetic benchmark's adapters and writes a
//! build tree: `<id>.emb` training embeddings, `<id>.bin` adapter blobs,
//! `build.json`, and `queries/<id>.emb` test embeddings (compounds included).

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::Args;
use lorafuse::bench::{Benchmark, BenchmarkConfig};
use lorafuse::library::{adapter_payload, write_embeddings, LayerEntry};
use lorafuse::Embedding;

use crate::build::{BuildRecord, BuildSpec};

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Benchmark configuration (JSON); defaults otherwise.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

fn write_emb(path: &Path, rows: &[Embedding], comment: &str) -> anyhow::Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    write_embeddings(BufWriter::new(file), rows, &[comment])?;
    Ok(())
}

pub fn run(args: SynthArgs) -> anyhow::Result<()> {
    let mut config = match &args.config {
        Some(p) => serde_json::from_slice(&fs::read(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => BenchmarkConfig::default(),
    };
    if let Some(s) = args.seed {
        config.seed = s;
    }
    config.validate()?;
    let bench = Benchmark::prepare(&config)?;
    let queries = args.out.join("queries");
    fs::create_dir_all(&queries).with_context(|| format!("creating {}", queries.display()))?;

    let mut records = Vec::new();
    for d in &bench.domains {
        let id = &d.spec.domain_id;
        write_emb(&args.out.join(format!("{id}.emb")), &d.data.train_embeddings, &format!("{id} training embeddings"))?;
        let test: Vec<Embedding> = d.data.test.iter().map(|t| t.embedding.clone()).collect();
        write_emb(&queries.join(format!("{id}.emb")), &test, &format!("{id} test embeddings"))?;

        let stored = d.training.adapter.cast::<f32>();
        fs::write(args.out.join(format!("{id}.bin")), adapter_payload(&stored))?;
        records.push(BuildRecord {
            domain_id: id.clone(),
            embeddings: format!("{id}.emb").into(),
            adapter_id: Some(id.clone()),
            adapter_blob: format!("{id}.bin").into(),
            layers: stored.layers().map(LayerEntry::from_pair).collect(),
            metadata: [("dataset".to_string(), id.clone())].into(),
        });
    }
    for c in &bench.compounds {
        let id = &c.spec.domain_id;
        let test: Vec<Embedding> = c.data.test.iter().map(|t| t.embedding.clone()).collect();
        write_emb(&queries.join(format!("{id}.emb")), &test, &format!("{id} test embeddings"))?;
    }
    let spec = BuildSpec {
        embedding_dim: Some(config.geometry.embedding_dim),
        records,
    };
    fs::write(args.out.join("build.json"), serde_json::to_vec_pretty(&spec)?)?;
    println!(
        "wrote {} domains and {} compound query sets to {}",
        bench.domains.len(),
        bench.compounds.len(),
        args.out.display()
    );
    Ok(())
}
