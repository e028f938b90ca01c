//! `lorafuse stream`: EMA swap policy, or k-means batch fusion with `--clusters`.
//!
//! Input is one embedding per line (whitespace-separated decimals), read
//! from `--input` or standard input. Blank lines and `#` comments are
//! skipped, as is a leading `<dim> <N>` header when the library dimension
//! is not 2, so embedding files can be replayed directly.

use std::fs::File;
use std::io::{self, BufRead, BufReader, Write};
use std::path::PathBuf;

use clap::Args;
use lorafuse::library::load;
use lorafuse::metrics::support_score;
use lorafuse::stream::{batch_cluster_fuse, StreamState, DEFAULT_BETA};
use lorafuse::{Embedding, Error};
use serde_json::json;

use crate::{FusionArgs, LibraryArg};

#[derive(Args, Debug)]
pub struct StreamArgs {
    #[command(flatten)]
    pub library: LibraryArg,
    /// Embedding rows; `-` reads standard input.
    #[arg(long, default_value = "-")]
    pub input: PathBuf,
    /// EMA decay in [0, 1).
    #[arg(long, default_value_t = DEFAULT_BETA)]
    pub beta: f64,
    /// Re-fuse when the EMA is farther than this from the active plan's weighted centroid (`inf` never re-fuses).
    #[arg(long, required_unless_present = "clusters")]
    pub threshold: Option<f64>,
    /// Batch mode: cluster all inputs into this many groups and fuse once per group.
    #[arg(long, conflicts_with = "threshold")]
    pub clusters: Option<usize>,
    /// Seed for k-means initialisation.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub fusion: FusionArgs,
}

fn open(input: &PathBuf) -> anyhow::Result<Box<dyn BufRead>> {
    if input.as_os_str() == "-" {
        return Ok(Box::new(BufReader::new(io::stdin())));
    }
    let file = File::open(input).map_err(|e| Error::Io {
        path: input.clone(),
        source: e,
    })?;
    Ok(Box::new(BufReader::new(file)))
}

struct Rows {
    reader: Box<dyn BufRead>,
    origin: PathBuf,
    dim: usize,
    line: usize,
    seen_data: bool,
}

impl Iterator for Rows {
    type Item = lorafuse::Result<Embedding>;

    fn next(&mut self) -> Option<Self::Item> {
        let mut buf = String::new();
        loop {
            buf.clear();
            self.line += 1;
            match self.reader.read_line(&mut buf) {
                Ok(0) => return None,
                Ok(_) => {}
                Err(e) => {
                    return Some(Err(Error::Io {
                        path: self.origin.clone(),
                        source: e,
                    }))
                }
            }
            let t = buf.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = t.split_whitespace().collect();
            let is_header = !self.seen_data
                && self.dim != 2
                && fields.len() == 2
                && fields.iter().all(|f| f.parse::<usize>().is_ok());
            self.seen_data = true;
            if is_header {
                continue;
            }
            let parsed = fields
                .iter()
                .map(|f| f.parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|_| Error::Parse {
                    path: self.origin.clone(),
                    line: self.line,
                    message: format!("`{t}` is not a row of decimals"),
                })
                .and_then(|v| {
                    if v.len() != self.dim {
                        return Err(Error::Parse {
                            path: self.origin.clone(),
                            line: self.line,
                            message: format!("expected {} values, found {}", self.dim, v.len()),
                        });
                    }
                    Embedding::new(v)
                });
            return Some(parsed);
        }
    }
}

pub fn run(args: StreamArgs) -> anyhow::Result<()> {
    let config = args.fusion.config()?;
    let state = match args.threshold {
        Some(t) => Some(StreamState::new(args.beta, t)?),
        None => None,
    };
    if args.clusters == Some(0) {
        return Err(Error::Usage("--clusters must be at least 1".into()).into());
    }
    let lib = load(&args.library.library)?;
    let rows = Rows {
        reader: open(&args.input)?,
        origin: args.input.clone(),
        dim: lib.embedding_dim(),
        line: 0,
        seen_data: false,
    };
    let stdout = io::stdout();
    let mut out = stdout.lock();

    if let Some(mut state) = state {
        for (step, e) in rows.enumerate() {
            let (next, event, _) = state.step(step, &e?, &lib, &config)?;
            state = next;
            writeln!(out, "{}", serde_json::to_string(&event)?)?;
            out.flush()?;
        }
        eprintln!("fusions={}", state.swap_count());
        return Ok(());
    }

    let embeddings = rows.collect::<lorafuse::Result<Vec<_>>>()?;
    let k = args.clusters.expect("clap requires threshold or clusters");
    let batch = batch_cluster_fuse(&embeddings, &lib, &config, k, args.seed)?;
    for (c, fused) in batch.fused.iter().enumerate() {
        let members: Vec<usize> = (0..embeddings.len()).filter(|&i| batch.assignment[i] == c).collect();
        let plan = fused.plan.as_ref().expect("fuse attaches its plan");
        let line = json!({
            "cluster": c,
            "size": members.len(),
            "members": members,
            "plan_digest": plan.digest(),
            "support_score": support_score(plan, config.epsilon_exact),
            "plan": plan,
        });
        writeln!(out, "{line}")?;
    }
    eprintln!("fusions={}", batch.fuse_calls());
    Ok(())
}
