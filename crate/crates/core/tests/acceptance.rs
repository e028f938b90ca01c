//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! fails if any criterion fails.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fs;
use std::io::Write;
use std::time::{Duration, Instant};

use lorafuse::bench::{Benchmark, BenchmarkConfig, SEMLA, UNIFORM, ZERO_SHOT, ORACLE};
use lorafuse::fusion::{compute_weights, merge_concat};
use lorafuse::library::{load, save, DomainRecord, Embedding, Library, Manifest, MANIFEST_FILE};
use lorafuse::metrics::{distance_performance_correlation, harmonic_mean};
use lorafuse::stream::run_stream;
use lorafuse::tensor::{AdapterSet, LoraPair, Matrix};
use lorafuse::{Error, FusionConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    ok: bool,
    detail: String,
}

fn report(line: std::fmt::Arguments) {
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{line}");
}

fn check(name: &str, limit: Duration, f: impl FnOnce() -> Outcome, failures: &mut Vec<String>) {
    let start = Instant::now();
    let out = f();
    let elapsed = start.elapsed();
    let in_time = elapsed <= limit;
    let pass = out.ok && in_time;
    report(format_args!(
        "{} {name}: {} [{:.2}s, limit {}s]",
        if pass { "PASS" } else { "FAIL" },
        out.detail,
        elapsed.as_secs_f64(),
        limit.as_secs()
    ));
    if !pass {
        failures.push(name.to_owned());
    }
}

fn naive_matmul(a: &Matrix<f64>, b: &Matrix<f64>) -> Vec<f64> {
    let (n, m, p) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; n * p];
    for i in 0..n {
        for k in 0..m {
            for j in 0..p {
                out[i * p + j] += a.get(i, k) * b.get(k, j);
            }
        }
    }
    out
}

fn merge_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for case in 0..200 {
        let d = rng.random_range(4..=32);
        let k = rng.random_range(4..=32);
        let r = rng.random_range(1..=8usize.min(d.min(k) - 1));
        let count = rng.random_range(1..=8);
        let adapters: Vec<AdapterSet<f64>> = (0..count)
            .map(|i| {
                let b = Matrix::from_fn(d, r, |_, _| rng.random_range(-1.0..1.0));
                let a = Matrix::from_fn(r, k, |_, _| rng.random_range(-1.0..1.0));
                let alpha = rng.random_range(0.5..16.0);
                AdapterSet::new(format!("a{i}"), vec![LoraPair::new("w", b, a, alpha).unwrap()]).unwrap()
            })
            .collect();
        let raw: Vec<f64> = (0..count).map(|_| rng.random_range(0.01..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let w: Vec<f64> = raw.iter().map(|x| x / total).collect();

        let mut expect = vec![0.0; d * k];
        for (adapter, wi) in adapters.iter().zip(&w) {
            let p = adapter.layer("w").unwrap();
            let s = p.alpha() / p.rank() as f64;
            for (e, v) in expect.iter_mut().zip(naive_matmul(p.b(), p.a())) {
                *e += wi * s * v;
            }
        }
        let refs: Vec<&AdapterSet<f64>> = adapters.iter().collect();
        let fused = merge_concat::<f64, f64>(&refs, &w).unwrap();
        let layer = &fused.layers["w"];
        let got: Vec<f64> = naive_matmul(&layer.b, &layer.a).into_iter().map(|v| v * layer.scaling).collect();
        let num: f64 = got.iter().zip(&expect).map(|(g, e)| (g - e) * (g - e)).sum::<f64>().sqrt();
        let den: f64 = expect.iter().map(|e| e * e).sum::<f64>().sqrt();
        let rel = num / den;
        if !(rel <= 1e-6) {
            return Outcome {
                ok: false,
                detail: format!("case {case}: relative error {rel:e}"),
            };
        }
        worst = worst.max(rel);
    }
    Outcome {
        ok: true,
        detail: format!("200 instances, worst relative error {worst:.2e}"),
    }
}

fn reference_weights(d: &[f64], tau: f64) -> Vec<f64> {
    let s: Vec<f64> = d.iter().map(|x| 1.0 / (x * tau)).collect();
    let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + s.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    s.iter().map(|x| (x - lse).exp()).collect()
}

fn weight_suite() -> Outcome {
    let taus = [1e-6, 1e-3, 0.01, 0.05, 1.0, 1e6];
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (mut one_hot_checked, mut worst_sum, mut worst_ref, mut widest_uniform) = (0, 0.0f64, 0.0f64, 0.0f64);
    for v in 0..1000 {
        let n = rng.random_range(2..=12);
        let d: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..2.0)).collect();
        let mut sorted = d.clone();
        sorted.sort_by(f64::total_cmp);
        let gap = sorted[1] - sorted[0];
        let argmin = d.iter().position(|&x| x == sorted[0]).unwrap();
        for &tau in &taus {
            let w = compute_weights(&d, tau, 1e-12).unwrap();
            let sum: f64 = w.iter().sum();
            worst_sum = worst_sum.max((sum - 1.0).abs());
            if (sum - 1.0).abs() > 1e-9 || w.iter().any(|x| *x < 0.0) {
                return Outcome {
                    ok: false,
                    detail: format!("vector {v}, tau {tau}: sum {sum}"),
                };
            }
            for i in 0..n {
                for j in 0..n {
                    if d[i] < d[j] && (w[i] < w[j] || (w[j] > 0.0 && w[i] <= w[j])) {
                        return Outcome {
                            ok: false,
                            detail: format!("vector {v}, tau {tau}: not monotone"),
                        };
                    }
                }
            }
            for (a, b) in w.iter().zip(reference_weights(&d, tau)) {
                worst_ref = worst_ref.max((a - b).abs());
            }
            if tau == 1e-6 && gap >= 0.01 {
                one_hot_checked += 1;
                if !(w[argmin] > 1.0 - 1e-9) {
                    return Outcome {
                        ok: false,
                        detail: format!("vector {v}: argmin weight {} at tau 1e-6", w[argmin]),
                    };
                }
            }
            if tau == 1e6 {
                let spread = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - w.iter().cloned().fold(f64::INFINITY, f64::min);
                widest_uniform = widest_uniform.max(spread);
            }
        }
    }
    let ok = widest_uniform < 1e-3 && worst_ref < 1e-12;
    Outcome {
        ok,
        detail: format!(
            "1000 vectors x 6 temperatures, max |sum-1| {worst_sum:.1e}, one-hot checked {one_hot_checked}, \
             tau=1e6 max-min {widest_uniform:.1e}, max diff vs log-sum-exp reference {worst_ref:.1e}"
        ),
    }
}

const SEMLA_ROW: [f64; 19] = [
    67.71, 68.95, 71.92, 51.73, 61.09, 60.06, 57.60, 47.35, 72.97, 52.38, 67.28, 55.92, 63.91, 57.30, 31.12, 38.18, 40.16,
    64.75, 51.35,
];
const UNIFORM_ROW: [f64; 19] = [
    67.40, 66.35, 69.71, 49.98, 58.28, 55.78, 54.70, 45.09, 73.75, 45.16, 61.02, 49.08, 62.18, 58.19, 31.51, 37.25, 38.83,
    63.06, 48.93,
];

fn h_mean_reproduction() -> Outcome {
    let oracle = |v: &[f64]| v.len() as f64 / v.iter().map(|x| 1.0 / x).sum::<f64>();
    let semla = harmonic_mean(&SEMLA_ROW).unwrap();
    let uniform = harmonic_mean(&UNIFORM_ROW).unwrap();
    let ok = (semla - 54.16).abs() <= 0.1
        && (uniform - 51.89).abs() <= 0.1
        && (semla - oracle(&SEMLA_ROW)).abs() < 1e-9
        && (uniform - oracle(&UNIFORM_ROW)).abs() < 1e-9;
    Outcome {
        ok,
        detail: format!("semla {semla:.3} (54.16), uniform {uniform:.3} (51.89)"),
    }
}

fn all_inclusive(bench: &Benchmark) -> Outcome {
    let r = bench.run_all_inclusive(&[1e-4]).unwrap();
    let gap = r.oracle_gap[0].1;
    Outcome {
        ok: gap <= 1e-3,
        detail: format!("max abs output gap to oracle at tau=1e-4: {gap:.2e}"),
    }
}

fn leave_one_out_ordering(seed0: &Benchmark) -> Outcome {
    let mut lines = Vec::new();
    let mut ok = true;
    for seed in 0..5u64 {
        let owned;
        let bench = if seed == 0 {
            seed0
        } else {
            owned = Benchmark::prepare(&BenchmarkConfig {
                seed,
                ..BenchmarkConfig::default()
            })
            .unwrap();
            &owned
        };
        let r = bench.run_leave_one_out(&bench.config.fusion).unwrap();
        let h = |m: &str| r.miou.h_mean(m).unwrap();
        let (o, s, u, z) = (h(ORACLE), h(SEMLA), h(UNIFORM), h(ZERO_SHOT));
        let wins = r
            .miou
            .domains
            .iter()
            .filter(|d| r.miou.get(d, SEMLA).unwrap() > r.miou.get(d, UNIFORM).unwrap())
            .count();
        let seed_ok = o > s && s > u && u > z && wins >= 8;
        ok &= seed_ok;
        lines.push(format!("seed {seed}: {o:.3}>{s:.3}>{u:.3}>{z:.3} wins {wins}/10"));
    }
    Outcome {
        ok,
        detail: lines.join("; "),
    }
}

fn compounds(bench: &Benchmark) -> Outcome {
    let reports = bench.compound_analysis(&bench.config.fusion).unwrap();
    let ok = !reports.is_empty() && reports.iter().all(|c| c.parents_lead && c.parent_share >= 0.7);
    Outcome {
        ok,
        detail: reports
            .iter()
            .map(|c| format!("{} parents share {:.3} lead {}", c.domain_id, c.parent_share, c.parents_lead))
            .collect::<Vec<_>>()
            .join("; "),
    }
}

fn pearson(pairs: &[(f64, f64)]) -> f64 {
    let n = pairs.len() as f64;
    let (sx, sy) = pairs.iter().fold((0.0, 0.0), |(a, b), p| (a + p.0, b + p.1));
    let (sxx, syy, sxy) = pairs
        .iter()
        .fold((0.0, 0.0, 0.0), |(a, b, c), p| (a + p.0 * p.0, b + p.1 * p.1, c + p.0 * p.1));
    (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
}

fn correlation(bench: &Benchmark) -> Outcome {
    let r = bench.run_leave_one_out(&bench.config.fusion).unwrap();
    let dist = distance_performance_correlation(&r.distance_pairs).unwrap();
    let supp = distance_performance_correlation(&r.support_pairs).unwrap();
    let agree = (dist.pearson_r - pearson(&r.distance_pairs)).abs() < 1e-9
        && (supp.pearson_r - pearson(&r.support_pairs)).abs() < 1e-9;
    Outcome {
        ok: agree && dist.pearson_r < -0.2 && supp.pearson_r > 0.0,
        detail: format!(
            "distance r {:.3} (slope {:.4}, n {}), support r {:.3} (n {})",
            dist.pearson_r, dist.slope, dist.n, supp.pearson_r, supp.n
        ),
    }
}

fn sweep(bench: &Benchmark) -> Outcome {
    let ks = &bench.config.sweep.top_k;
    let ts = &bench.config.sweep.temperature;
    let cells = bench.sweep_hyperparameters(ks, ts).unwrap();
    let best = cells.iter().map(|c| c.h_mean).fold(f64::NEG_INFINITY, f64::max);
    let interior = |c: &&lorafuse::bench::SweepCell| {
        c.top_k != ks[0] && c.top_k != ks[ks.len() - 1] && c.temperature != ts[0] && c.temperature != ts[ts.len() - 1]
    };
    let corner = |c: &&lorafuse::bench::SweepCell| {
        (c.top_k == ks[0] || c.top_k == ks[ks.len() - 1]) && (c.temperature == ts[0] || c.temperature == ts[ts.len() - 1])
    };
    let best_interior = cells.iter().filter(interior).map(|c| c.h_mean).fold(f64::NEG_INFINITY, f64::max);
    let best_corner = cells.iter().filter(corner).map(|c| c.h_mean).fold(f64::NEG_INFINITY, f64::max);
    let arg = cells.iter().find(|c| c.h_mean == best).unwrap();
    Outcome {
        ok: best_interior == best && best_corner < best,
        detail: format!(
            "max {best:.4} at K={} tau={}, best interior {best_interior:.4}, best corner {best_corner:.4}",
            arg.top_k, arg.temperature
        ),
    }
}

fn random_library(rng: &mut ChaCha8Rng, index: usize) -> Library {
    let dim = rng.random_range(1..=12);
    let layer_count = rng.random_range(1..=3);
    let shapes: Vec<(usize, usize)> = (0..layer_count).map(|_| (rng.random_range(2..=12), rng.random_range(2..=12))).collect();
    let rank = rng.random_range(1..shapes.iter().map(|(d, k)| *d.min(k)).min().unwrap());
    let m = rng.random_range(1..=6);
    let mut lib = Library::new(dim);
    for i in 0..m {
        let pairs = shapes
            .iter()
            .enumerate()
            .map(|(l, &(d, k))| {
                let b = Matrix::from_fn(d, rank, |_, _| rng.random_range(-3.0f32..3.0));
                let a = Matrix::from_fn(rank, k, |_, _| rng.random_range(-3.0f32..3.0));
                LoraPair::new(format!("layer{l}"), b, a, rng.random_range(1.0..32.0)).unwrap()
            })
            .collect();
        let adapter = AdapterSet::new(format!("lib{index}-ad{i}"), pairs)
            .unwrap()
            .with_metadata("dataset", format!("set {i}"));
        let centroid = Embedding::new((0..dim).map(|_| rng.random_range(-5.0..5.0)).collect()).unwrap();
        let mut record = DomainRecord::new(format!("dom-{i:02}"), centroid, rng.random_range(1..5000), adapter, None).unwrap();
        record.metadata.insert("source".into(), format!("synthetic {index}"));
        lib = lib.extend(record).unwrap();
    }
    lib
}

fn encode(adapter: &AdapterSet<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    for p in adapter.layers() {
        for v in p.b().data().iter().chain(p.a().data()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn serialization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let root = tempfile::tempdir().unwrap();
    for i in 0..100 {
        let lib = random_library(&mut rng, i);
        let dir = root.path().join(format!("lib{i}"));
        let manifest = save(&lib, &dir).unwrap();
        for (record, entry) in lib.records().zip(&manifest.records) {
            let bytes = fs::read(dir.join(&entry.adapter_blob.file)).unwrap();
            if bytes != encode(record.adapter()) {
                return Outcome {
                    ok: false,
                    detail: format!("library {i}: blob {} differs from reference encoding", entry.adapter_blob.file),
                };
            }
        }
        let back = load(&dir).unwrap();
        let reread: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE)).unwrap()).unwrap();
        let dir2 = root.path().join(format!("lib{i}-again"));
        let manifest2 = save(&back, &dir2).unwrap();
        let payloads_equal = manifest.records.iter().all(|e| {
            fs::read(dir.join(&e.adapter_blob.file)).unwrap() == fs::read(dir2.join(&e.adapter_blob.file)).unwrap()
        });
        if back != lib || reread != manifest || manifest2 != manifest || !payloads_equal {
            return Outcome {
                ok: false,
                detail: format!("library {i} did not round-trip"),
            };
        }

        let entry = &manifest.records[rng.random_range(0..manifest.records.len())].adapter_blob;
        let path = dir.join(&entry.file);
        let mut bytes = fs::read(&path).unwrap();
        let at = rng.random_range(0..bytes.len());
        bytes[at] ^= 1 << rng.random_range(0..8);
        fs::write(&path, &bytes).unwrap();
        match load(&dir) {
            Err(Error::Checksum { blob, .. }) if blob == entry.file => {}
            other => {
                return Outcome {
                    ok: false,
                    detail: format!("library {i}: corruption of {} at byte {at} gave {other:?}", entry.file),
                }
            }
        }
    }
    Outcome {
        ok: true,
        detail: "100 libraries round-tripped byte-identically; 100 single-byte corruptions detected".into(),
    }
}

fn stream_library() -> Library {
    let record = |id: &str, c: [f64; 2], seed: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = Matrix::from_fn(4, 2, |_, _| rng.random_range(-1.0f32..1.0));
        let a = Matrix::from_fn(2, 3, |_, _| rng.random_range(-1.0f32..1.0));
        let adapter = AdapterSet::new(id, vec![LoraPair::new("w", b, a, 4.0).unwrap()]).unwrap();
        DomainRecord::new(id, Embedding::new(c.to_vec()).unwrap(), 10, adapter, None).unwrap()
    };
    Library::from_records(2, [record("a", [0.0, 0.0], 1), record("b", [10.0, 0.0], 2)]).unwrap()
}

fn swaps(stream: &[Embedding], lib: &Library, cfg: &FusionConfig, beta: f64, t: f64) -> usize {
    run_stream(stream, lib, cfg, beta, t).unwrap().1.swap_count()
}

fn stream_policy() -> Outcome {
    let lib = stream_library();
    let cfg = FusionConfig::new(2, 0.01);
    let jitter = |i: usize| if i.is_multiple_of(2) { 0.2 } else { -0.2 };
    let e = |x: f64, y: f64| Embedding::new(vec![x, y]).unwrap();
    let two_shift: Vec<Embedding> = (0..90)
        .map(|i| match i / 30 {
            1 => e(10.0 + jitter(i), jitter(i)),
            _ => e(jitter(i), -jitter(i)),
        })
        .collect();
    let n = two_shift.len();
    let calibrated = swaps(&two_shift, &lib, &cfg, 0.9, 7.5);
    let never = swaps(&two_shift, &lib, &cfg, 0.9, f64::INFINITY);
    let always = swaps(&two_shift, &lib, &cfg, 0.9, 0.0);

    let thresholds: Vec<f64> = (0..=40).map(|i| i as f64 * 0.3).collect();
    let mut monotone = true;
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut streams = vec![two_shift.clone()];
    for _ in 0..20 {
        let mut s = Vec::new();
        for _ in 0..rng.random_range(1..6) {
            let domain = rng.random_range(0..2) as f64;
            for _ in 0..rng.random_range(15..40) {
                s.push(e(10.0 * domain + rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)));
            }
        }
        streams.push(s);
    }
    for s in &streams {
        let counts: Vec<usize> = thresholds.iter().map(|&t| swaps(s, &lib, &cfg, 0.8, t)).collect();
        monotone &= counts.windows(2).all(|w| w[0] >= w[1]);
    }
    Outcome {
        ok: calibrated == 3 && never == 1 && always == n && monotone,
        detail: format!(
            "two-shift stream: {calibrated} fusions at threshold 7.5, {never} at +inf, {always} of {n} at 0; \
             monotone over {} thresholds x {} streams: {monotone}",
            thresholds.len(),
            streams.len()
        ),
    }
}

fn linear_host() -> Outcome {
    let mut config = BenchmarkConfig::default();
    config.host.hidden_dims = vec![];
    config.samples.n_test = 8;
    let bench = Benchmark::prepare(&config).unwrap();
    let gap = bench.late_fusion_logit_gap(&config.fusion).unwrap();
    Outcome {
        ok: gap <= 1e-9,
        detail: format!("max pre-softmax gap between parameter and late fusion: {gap:.2e}"),
    }
}

#[test]
fn acceptance() {
    let mut failures = Vec::new();
    let secs = Duration::from_secs;

    check("merge-equivalence identity", secs(5), merge_equivalence, &mut failures);
    check("weight simplex and limits", secs(5), weight_suite, &mut failures);
    check("h-mean reproduction", secs(1), h_mean_reproduction, &mut failures);

    let start = Instant::now();
    let seed0 = Benchmark::prepare(&BenchmarkConfig::default()).unwrap();
    let prep = start.elapsed();
    report(format_args!("default benchmark prepared in {:.2}s", prep.as_secs_f64()));

    check("all-inclusive one-hot limit", secs(30) - prep, || all_inclusive(&seed0), &mut failures);
    check("leave-one-out ordering", secs(120) - prep, || leave_one_out_ordering(&seed0), &mut failures);
    check("compound-domain composition", secs(30) - prep, || compounds(&seed0), &mut failures);
    check("distance-performance correlation", secs(60) - prep, || correlation(&seed0), &mut failures);
    check("hyper-parameter sweep shape", secs(300) - prep, || sweep(&seed0), &mut failures);
    check("serialization", secs(10), serialization, &mut failures);
    check("stream policy", secs(5), stream_policy, &mut failures);
    check("linear-host equivalence", secs(5), linear_host, &mut failures);

    assert!(failures.is_empty(), "failed criteria: {failures:?}");
}
