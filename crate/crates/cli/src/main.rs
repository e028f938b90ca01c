//! `lorafuse`: build adapter libraries, query them, run the synthetic
//! benchmark and replay embedding streams.
//!
//! Exit codes: 0 success, 2 usage error, 3 structural or data error,
//! 4 numeric failure.

mod build;
mod eval;
mod query;
mod stream;
mod synth;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lorafuse::{DistanceMetric, ErrorKind, FusionConfig};

#[derive(Parser)]
#[command(name = "lorafuse", version, about = "Retrieval-driven low-rank adapter fusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a library directory from embedding files, adapter blobs and a JSON stub.
    Build(build::BuildArgs),
    /// Print the fusion plan for each query embedding.
    Query(query::QueryArgs),
    /// Run the synthetic benchmark and write reports.
    Eval(eval::EvalArgs),
    /// Replay a stream of embeddings through the swap policy.
    Stream(stream::StreamArgs),
    /// Render a contribution CSV as SVG.
    Plot(eval::PlotArgs),
    /// Write a synthetic library source tree (embeddings, trained adapters, build stub).
    Synth(synth::SynthArgs),
}

/// Retrieval flags shared by `query` and `stream`.
#[derive(Args, Debug, Clone)]
pub struct FusionArgs {
    /// Number of adapters to merge.
    #[arg(long, default_value_t = 7)]
    pub top_k: usize,
    /// Softmax temperature over inverse distances.
    #[arg(long, default_value_t = 0.01)]
    pub tau: f64,
    #[arg(long, default_value = "euclidean", value_parser = parse_metric)]
    pub metric: DistanceMetric,
    /// L2-normalise query embeddings before retrieval.
    #[arg(long)]
    pub normalize: bool,
}

impl FusionArgs {
    pub fn config(&self) -> lorafuse::Result<FusionConfig> {
        let c = FusionConfig {
            normalize_query: self.normalize,
            ..FusionConfig::new(self.top_k, self.tau).with_metric(self.metric)
        };
        c.validate()?;
        Ok(c)
    }
}

fn parse_metric(s: &str) -> Result<DistanceMetric, String> {
    s.parse().map_err(|e: lorafuse::Error| e.to_string())
}

#[derive(Args, Debug, Clone)]
pub struct LibraryArg {
    /// Library directory (contains manifest.json).
    #[arg(long)]
    pub library: PathBuf,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<lorafuse::Error>() {
            return match e.kind() {
                ErrorKind::Usage => 2,
                ErrorKind::Structural => 3,
                ErrorKind::Numeric => 4,
            };
        }
        if cause.is::<std::io::Error>() || cause.is::<serde_json::Error>() {
            return 3;
        }
    }
    2
}

fn broken_pipe(err: &anyhow::Error) -> bool {
    err.chain()
        .any(|c| c.downcast_ref::<std::io::Error>().is_some_and(|e| e.kind() == std::io::ErrorKind::BrokenPipe))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Build(a) => build::run(a),
        Command::Query(a) => query::run(a),
        Command::Eval(a) => eval::run(a),
        Command::Stream(a) => stream::run(a),
        Command::Plot(a) => eval::plot(a),
        Command::Synth(a) => synth::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if broken_pipe(&e) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
