//! `lorafuse eval` and `lorafuse plot`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, ValueEnum};
use lorafuse::bench::{Benchmark, BenchmarkConfig};
use lorafuse::library::FORMAT_VERSION;
use lorafuse::metrics::{
    distance_performance_correlation, read_contribution_csv, render_heatmap_svg, render_pies_svg, write_contribution_csv,
    write_metric_table_csv, write_pairs_csv, write_sweep_csv, MetricTable, ReportHeader,
};
use lorafuse::DistanceMetric;
use serde_json::json;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Protocol {
    LeaveOneOut,
    AllInclusive,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Benchmark configuration (JSON). Defaults apply to missing fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub top_k: Option<usize>,
    /// Temperature. Under all-inclusive, may be repeated to compare several.
    #[arg(long)]
    pub tau: Vec<f64>,
    #[arg(long, value_parser = crate::parse_metric)]
    pub metric: Option<DistanceMetric>,
    #[arg(long, value_enum, default_value = "leave-one-out")]
    pub protocol: Protocol,
    /// Also run the K x tau grid from the config.
    #[arg(long)]
    pub sweep: bool,
    #[arg(long, default_value = "report")]
    pub report_dir: PathBuf,
    /// Write heatmap and pie SVGs next to the CSVs.
    #[arg(long)]
    pub svg: bool,
    /// Contribution cells below this are left blank in CSV and SVG output.
    #[arg(long, default_value_t = 0.1)]
    pub threshold: f64,
}

pub const FAILED_MARKER: &str = "FAILED";

fn effective_config(args: &EvalArgs) -> anyhow::Result<BenchmarkConfig> {
    let mut config = match &args.config {
        Some(p) => {
            let raw = fs::read(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_slice(&raw).with_context(|| format!("parsing {}", p.display()))?
        }
        None => BenchmarkConfig::default(),
    };
    if let Some(s) = args.seed {
        config.seed = s;
    }
    if let Some(k) = args.top_k {
        config.fusion.top_k = k;
    }
    if let Some(m) = args.metric {
        config.fusion.metric = m;
    }
    match (args.protocol, args.tau.as_slice()) {
        (_, []) => {}
        (Protocol::LeaveOneOut, [t]) => config.fusion.temperature = *t,
        (Protocol::LeaveOneOut, _) => {
            return Err(lorafuse::Error::Usage("leave-one-out takes a single --tau".into()).into());
        }
        (Protocol::AllInclusive, ts) => config.all_inclusive_temperatures = ts.to_vec(),
    }
    if !(0.0..=1.0).contains(&args.threshold) {
        return Err(lorafuse::Error::Usage(format!("threshold must lie in [0, 1], got {}", args.threshold)).into());
    }
    config.validate()?;
    Ok(config)
}

fn create(dir: &Path, name: &str) -> anyhow::Result<BufWriter<File>> {
    let path = dir.join(name);
    Ok(BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?))
}

fn print_table(table: &MetricTable) -> anyhow::Result<()> {
    let h = table.h_means()?;
    let width = table.methods.iter().map(String::len).max().unwrap_or(0);
    for (m, v) in table.methods.iter().zip(h) {
        println!("{m:<width$}  {:.4}", v);
    }
    Ok(())
}

pub fn run(args: EvalArgs) -> anyhow::Result<()> {
    let config = effective_config(&args)?;
    fs::create_dir_all(&args.report_dir).with_context(|| format!("creating {}", args.report_dir.display()))?;
    let marker = args.report_dir.join(FAILED_MARKER);
    if marker.exists() {
        fs::remove_file(&marker)?;
    }
    let result = run_protocols(&args, &config);
    if let Err(e) = &result {
        fs::write(&marker, format!("{e:#}\n"))?;
    }
    result
}

fn run_protocols(args: &EvalArgs, config: &BenchmarkConfig) -> anyhow::Result<()> {
    let bench = Benchmark::prepare(config)?;
    let header = ReportHeader {
        format_version: FORMAT_VERSION,
        library_digest: bench.library.digest(),
        config: json!({
            "benchmark": config,
            "protocol": args.protocol.to_possible_value().map(|v| v.get_name().to_owned()),
            "sweep": args.sweep,
            "threshold": args.threshold,
        }),
    };
    let dir = &args.report_dir;
    match args.protocol {
        Protocol::LeaveOneOut => {
            let r = bench.run_leave_one_out(&config.fusion)?;
            write_metric_table_csv(create(dir, "miou.csv")?, &header, &r.miou)?;
            write_metric_table_csv(create(dir, "accuracy.csv")?, &header, &r.accuracy)?;
            write_contribution_csv(create(dir, "contributions.csv")?, &header, &r.contributions, Some(args.threshold))?;
            write_pairs_csv(create(dir, "distance_pairs.csv")?, &header, ("distance", "accuracy_gain"), &r.distance_pairs)?;
            write_pairs_csv(create(dir, "support_pairs.csv")?, &header, ("support_score", "accuracy"), &r.support_pairs)?;
            let mut plans = create(dir, "plans.jsonl")?;
            for (domain, image, p) in &r.plans {
                writeln!(plans, "{}", json!({"domain": domain, "image": image, "plan": p}))?;
            }
            plans.flush()?;
            let correlation = json!({
                "distance": distance_performance_correlation(&r.distance_pairs)?,
                "support": distance_performance_correlation(&r.support_pairs)?,
                "held_out_touches": r.held_out_touches,
            });
            fs::write(dir.join("correlation.json"), serde_json::to_vec_pretty(&correlation)?)?;
            if !bench.compounds.is_empty() {
                let compounds = bench.compound_analysis(&config.fusion)?;
                fs::write(dir.join("compounds.json"), serde_json::to_vec_pretty(&compounds)?)?;
            }
            if args.svg {
                fs::write(dir.join("heatmap.svg"), render_heatmap_svg(&r.contributions, args.threshold))?;
                fs::write(dir.join("pies.svg"), render_pies_svg(&r.contributions, args.threshold))?;
            }
            println!("leave-one-out mIoU h-mean (K={}, tau={})", config.fusion.top_k, config.fusion.temperature);
            print_table(&r.miou)?;
        }
        Protocol::AllInclusive => {
            let r = bench.run_all_inclusive(&config.all_inclusive_temperatures)?;
            write_metric_table_csv(create(dir, "all_inclusive.csv")?, &header, &r.miou)?;
            fs::write(dir.join("oracle_gap.json"), serde_json::to_vec_pretty(&r.oracle_gap)?)?;
            println!("all-inclusive mIoU h-mean (K={})", config.fusion.top_k);
            print_table(&r.miou)?;
            for (t, gap) in &r.oracle_gap {
                println!("tau={t} max abs output gap to oracle {gap:.3e}");
            }
        }
    }
    if args.sweep {
        let cells = bench.sweep_hyperparameters(&config.sweep.top_k, &config.sweep.temperature)?;
        let rows: Vec<(usize, f64, f64)> = cells.iter().map(|c| (c.top_k, c.temperature, c.h_mean)).collect();
        write_sweep_csv(create(dir, "sweep.csv")?, &header, &rows)?;
        if let Some(best) = cells.iter().max_by(|a, b| a.h_mean.total_cmp(&b.h_mean)) {
            println!("sweep best K={} tau={} h-mean {:.4}", best.top_k, best.temperature, best.h_mean);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PlotKind {
    Heatmap,
    Pies,
}

#[derive(Args, Debug)]
pub struct PlotArgs {
    /// Contribution CSV written by `eval`.
    #[arg(long)]
    pub contributions: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "heatmap")]
    pub kind: PlotKind,
    /// Cells below this are not drawn.
    #[arg(long, default_value_t = 0.1)]
    pub threshold: f64,
}

pub fn plot(args: PlotArgs) -> anyhow::Result<()> {
    let file = File::open(&args.contributions).with_context(|| format!("opening {}", args.contributions.display()))?;
    let m = read_contribution_csv(file)?;
    let svg = match args.kind {
        PlotKind::Heatmap => render_heatmap_svg(&m, args.threshold),
        PlotKind::Pies => render_pies_svg(&m, args.threshold),
    };
    fs::write(&args.out, svg)?;
    Ok(())
}
