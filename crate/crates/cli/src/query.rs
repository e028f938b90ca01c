//! `lorafuse query`: one plan per query embedding, as JSON lines.

use std::fs;
use std::io::Write;
use std::path::PathBuf;

use clap::Args;
use lorafuse::fusion::{merge_plan, plan};
use lorafuse::library::{load, read_embeddings};
use serde::Serialize;

use crate::{FusionArgs, LibraryArg};

#[derive(Args, Debug)]
pub struct QueryArgs {
    #[command(flatten)]
    pub library: LibraryArg,
    /// Embedding file with one or more query rows.
    #[arg(long)]
    pub embedding: PathBuf,
    #[command(flatten)]
    pub fusion: FusionArgs,
    /// Write the fused adapter of a single query: an f32 blob at PATH and its layer table at PATH.json.
    #[arg(long)]
    pub merge_out: Option<PathBuf>,
}

#[derive(Serialize)]
struct FusedLayerEntry {
    name: String,
    b_shape: [usize; 2],
    a_shape: [usize; 2],
    /// Rank of one source adapter; the merged rank is `a_shape[0]`.
    rank: usize,
    scaling: f64,
}

#[derive(Serialize)]
struct FusedSidecar<'a> {
    blob: String,
    dtype: &'static str,
    layers: Vec<FusedLayerEntry>,
    plan: &'a lorafuse::FusionPlan,
}

pub fn run(args: QueryArgs) -> anyhow::Result<()> {
    let config = args.fusion.config()?;
    let lib = load(&args.library.library)?;
    let queries = read_embeddings(&args.embedding)?;
    if args.merge_out.is_some() && queries.len() != 1 {
        return Err(lorafuse::Error::Usage(format!(
            "--merge-out needs exactly one query embedding, got {}",
            queries.len()
        ))
        .into());
    }
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for q in &queries {
        let p = plan(q, &lib, &config)?;
        writeln!(out, "{}", p.to_json())?;
        if let Some(path) = &args.merge_out {
            let fused = merge_plan(&p, &lib)?;
            let mut bytes = Vec::new();
            let mut layers = Vec::new();
            for (name, l) in &fused.layers {
                for v in l.b.data().iter().chain(l.a.data()) {
                    bytes.extend_from_slice(&(*v as f32).to_le_bytes());
                }
                layers.push(FusedLayerEntry {
                    name: name.clone(),
                    b_shape: [l.b.rows(), l.b.cols()],
                    a_shape: [l.a.rows(), l.a.cols()],
                    rank: l.rank,
                    scaling: l.scaling,
                });
            }
            fs::write(path, &bytes)?;
            let sidecar = FusedSidecar {
                blob: path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default(),
                dtype: "f32le",
                layers,
                plan: &p,
            };
            let mut side = path.clone().into_os_string();
            side.push(".json");
            fs::write(side, serde_json::to_vec_pretty(&sidecar)?)?;
        }
    }
    Ok(())
}
