//! Synthetic desk-scale benchmark: domain generators, a toy affine host with
//! trainable low-rank adapters, and the leave-one-out, all-inclusive,
//! compound-domain and hyper-parameter sweep harnesses.
//!
//! Geometry: group anchors and per-domain offsets sit on distinct embedding
//! axes, so centers lie on a scaled simplex. Each domain's target map is an
//! affine function of its center, `T(c) = T0 + gain * sum_j c_j u_j v_j^T`,
//! which makes nearby domains need similar adapters and makes a two-parent
//! compound's target exactly the mix of its parents' targets.

pub mod model;
pub mod synth;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{apply_fused, convex_combine, late_fuse_outputs, merge_plan, merge_uniform, plan, FusionConfig, FusionPlan};
use crate::library::{build_record, AccessLog, Embedding, Library, RecordOptions};
use crate::metrics::{harmonic_mean, support_score, ConfusionMatrix, ContributionAccumulator, ContributionMatrix, MetricTable};
use crate::tensor::{AdapterSet, Matrix};

pub use model::{argmax_rows, delta_norm, softmax_rows, Head, Samples, Targets, ToyModel, TrainedAdapter, TrainerConfig};
pub use synth::{generate_domain, GeneratedDomain, SyntheticDomainSpec, TestImage};

use model::{normal, train_adapter};

pub const ZERO_SHOT: &str = "zero-shot";
pub const UNIFORM: &str = "uniform";
pub const UNIFORM_LATE: &str = "uniform-late";
pub const SEMLA: &str = "semla";
pub const SEMLA_LATE: &str = "semla-late";
/// Adapter trained on the evaluation domain itself; an unfair upper reference.
pub const ORACLE: &str = "oracle";

pub const LEAVE_ONE_OUT_METHODS: [&str; 6] = [ZERO_SHOT, UNIFORM, UNIFORM_LATE, SEMLA, SEMLA_LATE, ORACLE];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HostConfig {
    pub feature_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub class_count: usize,
    pub logit_gain: f64,
    pub head: Head,
}

impl Default for HostConfig {
    fn default() -> Self {
        Self {
            feature_dim: 16,
            hidden_dims: vec![16],
            class_count: 8,
            logit_gain: 2.0,
            head: Head::Softmax,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeometryConfig {
    pub embedding_dim: usize,
    /// Domains per group; the total is the library size.
    pub group_sizes: Vec<usize>,
    /// Distance of each group anchor from the origin.
    pub group_radius: f64,
    /// Range of each domain's distance from its group anchor.
    pub domain_radius: (f64, f64),
    /// Per-coordinate standard deviation of embeddings around their center.
    pub spread: f64,
    /// Magnitude of the target-map component shared by every domain.
    pub shared_gain: f64,
    /// Target-map change per unit of embedding coordinate.
    pub target_gain: f64,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self {
            embedding_dim: 16,
            group_sizes: vec![4, 3, 3],
            group_radius: 12.5,
            domain_radius: (2.5, 10.0),
            spread: 0.625,
            shared_gain: 5.0,
            target_gain: 0.48,
        }
    }
}

/// Held-out domain centred at `mix * c_a + (1 - mix) * c_b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompoundSpec {
    pub parents: (usize, usize),
    pub mix: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub pixels_per_image: usize,
    pub label_temperature: f64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            n_train: 32,
            n_test: 24,
            pixels_per_image: 20,
            label_temperature: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub top_k: Vec<usize>,
    pub temperature: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            top_k: vec![1, 3, 5, 7, 9],
            temperature: vec![1e-3, 5e-3, 0.01, 0.05, 0.1],
        }
    }
}

/// Everything a benchmark run depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    pub seed: u64,
    pub host: HostConfig,
    pub geometry: GeometryConfig,
    pub samples: SampleConfig,
    pub trainer: TrainerConfig,
    pub fusion: FusionConfig,
    pub compounds: Vec<CompoundSpec>,
    /// Temperatures compared against the oracle in the all-inclusive setting.
    pub all_inclusive_temperatures: Vec<f64>,
    pub sweep: SweepConfig,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            host: HostConfig::default(),
            geometry: GeometryConfig::default(),
            samples: SampleConfig::default(),
            trainer: TrainerConfig::default(),
            fusion: FusionConfig::default(),
            compounds: vec![
                CompoundSpec { parents: (0, 1), mix: 0.5 },
                CompoundSpec { parents: (4, 5), mix: 0.6 },
                CompoundSpec { parents: (7, 8), mix: 0.5 },
            ],
            all_inclusive_temperatures: vec![1e-4, 0.05],
            sweep: SweepConfig::default(),
        }
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Independent per-task seed.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    splitmix(splitmix(seed ^ splitmix(stream)) ^ index)
}

fn unit_vector(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| normal(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

fn outer(u: &[f64], v: &[f64]) -> Matrix<f64> {
    Matrix::from_fn(u.len(), v.len(), |i, j| u[i] * v[j])
}

pub fn domain_id(index: usize) -> String {
    format!("d{index:02}")
}

pub fn compound_id(c: &CompoundSpec) -> String {
    format!("mix-{}-{}", domain_id(c.parents.0), domain_id(c.parents.1))
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        self.fusion.validate()?;
        let g = &self.geometry;
        let m: usize = g.group_sizes.iter().sum();
        if m < 3 {
            return Err(Error::usage(format!("the benchmark needs at least 3 domains, got {m}")));
        }
        if g.group_sizes.contains(&0) {
            return Err(Error::usage("group sizes must be positive"));
        }
        if g.group_sizes.len() + m > g.embedding_dim {
            return Err(Error::usage(format!(
                "embedding_dim {} is too small for {} groups and {m} domains",
                g.embedding_dim,
                g.group_sizes.len()
            )));
        }
        if !(g.domain_radius.0 >= 0.0 && g.domain_radius.0 <= g.domain_radius.1) {
            return Err(Error::usage("domain_radius must be an ordered nonnegative range"));
        }
        for c in &self.compounds {
            if c.parents.0 >= m || c.parents.1 >= m || c.parents.0 == c.parents.1 {
                return Err(Error::usage(format!("compound parents {:?} are invalid", c.parents)));
            }
            if !(0.0..=1.0).contains(&c.mix) {
                return Err(Error::usage(format!("compound mix must lie in [0, 1], got {}", c.mix)));
            }
        }
        if self.all_inclusive_temperatures.iter().any(|t| !(*t > 0.0)) {
            return Err(Error::usage("all-inclusive temperatures must be positive"));
        }
        Ok(())
    }

    pub fn build_host(&self) -> Result<ToyModel> {
        let h = &self.host;
        ToyModel::random(
            h.feature_dim,
            &h.hidden_dims,
            h.class_count,
            h.logit_gain,
            h.head,
            derive_seed(self.seed, 1, 0),
        )
    }

    /// Library domains and compound domains implied by the geometry.
    pub fn domain_specs(&self, host: &ToyModel) -> Result<(Vec<SyntheticDomainSpec>, Vec<SyntheticDomainSpec>)> {
        self.validate()?;
        let g = &self.geometry;
        let dim = g.embedding_dim;
        let last = &host.layers()[host.layers().len() - 1].weight;
        let (classes, width) = last.shape();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, 2, 0));

        let mut shared = Matrix::zeros(classes, width);
        for _ in 0..2 {
            let u = unit_vector(&mut rng, classes);
            let v = unit_vector(&mut rng, width);
            shared.axpy(g.shared_gain, &outer(&u, &v))?;
        }
        let axes: Vec<Matrix<f64>> = (0..dim)
            .map(|_| {
                let u = unit_vector(&mut rng, classes);
                let v = unit_vector(&mut rng, width);
                outer(&u, &v)
            })
            .collect();
        let target = |center: &[f64]| -> Result<Matrix<f64>> {
            let mut t = shared.clone();
            for (c, axis) in center.iter().zip(&axes) {
                if *c != 0.0 {
                    t.axpy(g.target_gain * c, axis)?;
                }
            }
            Ok(t)
        };

        let groups = g.group_sizes.len();
        let mut centers = Vec::new();
        for (gi, &size) in g.group_sizes.iter().enumerate() {
            for _ in 0..size {
                let i = centers.len();
                let r = rng.random_range(g.domain_radius.0..=g.domain_radius.1);
                let mut c = vec![0.0; dim];
                c[gi] = g.group_radius;
                c[groups + i] = r;
                centers.push(c);
            }
        }
        let s = &self.samples;
        let spec = |id: String, center: Vec<f64>, seed: u64| -> Result<SyntheticDomainSpec> {
            Ok(SyntheticDomainSpec {
                domain_id: id,
                target_map: target(&center)?,
                embedding_center: Embedding::new(center)?,
                embedding_spread: g.spread,
                n_train: s.n_train,
                n_test: s.n_test,
                pixels_per_image: s.pixels_per_image,
                seed,
                label_temperature: s.label_temperature,
            })
        };
        let domains = centers
            .iter()
            .enumerate()
            .map(|(i, c)| spec(domain_id(i), c.clone(), derive_seed(self.seed, 3, i as u64)))
            .collect::<Result<Vec<_>>>()?;
        let compounds = self
            .compounds
            .iter()
            .enumerate()
            .map(|(j, cs)| {
                let (a, b) = (&centers[cs.parents.0], &centers[cs.parents.1]);
                let c = a.iter().zip(b).map(|(x, y)| cs.mix * x + (1.0 - cs.mix) * y).collect();
                spec(compound_id(cs), c, derive_seed(self.seed, 4, j as u64))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((domains, compounds))
    }
}

/// A library domain with its data and trained adapter.
#[derive(Debug, Clone)]
pub struct PreparedDomain {
    pub spec: SyntheticDomainSpec,
    pub data: GeneratedDomain,
    pub training: TrainedAdapter,
}

/// A held-out compound domain and the library indices of its parents.
#[derive(Debug, Clone)]
pub struct PreparedCompound {
    pub spec: SyntheticDomainSpec,
    pub data: GeneratedDomain,
    pub parents: (String, String),
}

/// A trained benchmark, reusable across protocols and hyper-parameters.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub config: BenchmarkConfig,
    pub host: ToyModel,
    pub domains: Vec<PreparedDomain>,
    pub compounds: Vec<PreparedCompound>,
    pub library: Library,
    /// Host weights with each domain's own stored adapter applied.
    adapted: BTreeMap<String, BTreeMap<String, Matrix<f64>>>,
}

/// Output of a leave-one-out run.
#[derive(Debug, Clone)]
pub struct LeaveOneOutReport {
    /// Per-domain mIoU for each method in [`LEAVE_ONE_OUT_METHODS`].
    pub miou: MetricTable,
    pub accuracy: MetricTable,
    pub contributions: ContributionMatrix,
    /// `(test domain, image index, plan)` for every SemLA query.
    pub plans: Vec<(String, usize, FusionPlan)>,
    /// `(distance to adapter centroid, single-adapter accuracy gain over zero-shot)` per (image, adapter).
    pub distance_pairs: Vec<(f64, f64)>,
    /// `(support score, SemLA accuracy)` per image.
    pub support_pairs: Vec<(f64, f64)>,
    /// Times a held-out record was read through its leave-one-out view. Always zero.
    pub held_out_touches: usize,
}

#[derive(Debug, Clone)]
pub struct AllInclusiveReport {
    pub miou: MetricTable,
    /// `(temperature, max abs output difference between SemLA and the oracle)` over all test pixels.
    pub oracle_gap: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompoundReport {
    pub domain_id: String,
    pub parents: (String, String),
    /// Mean fusion weight per adapter, largest first.
    pub ranked: Vec<(String, f64)>,
    pub parent_share: f64,
    /// The parents hold the two largest mean weights.
    pub parents_lead: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub top_k: usize,
    pub temperature: f64,
    pub h_mean: f64,
}

struct HeldOut {
    domain: String,
    miou: Vec<f64>,
    accuracy: Vec<f64>,
    plans: Vec<FusionPlan>,
    distance_pairs: Vec<(f64, f64)>,
    support_pairs: Vec<(f64, f64)>,
    touches: usize,
}

fn pixel_accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    pred.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / truth.len() as f64
}

impl Benchmark {
    /// Generates every domain, trains one adapter per library domain and assembles the library.
    pub fn prepare(config: &BenchmarkConfig) -> Result<Self> {
        let host = config.build_host()?;
        let (domains, compounds) = config.domain_specs(&host)?;
        Self::from_specs(config, host, domains, compounds)
    }

    /// Builds a benchmark from explicit specs. Compound specs take their
    /// parents from `config.compounds`, in order.
    pub fn from_specs(
        config: &BenchmarkConfig,
        host: ToyModel,
        domains: Vec<SyntheticDomainSpec>,
        compound_specs: Vec<SyntheticDomainSpec>,
    ) -> Result<Self> {
        config.fusion.validate()?;
        if domains.len() < 3 {
            return Err(Error::usage(format!("the benchmark needs at least 3 domains, got {}", domains.len())));
        }
        let prepared = domains
            .into_par_iter()
            .map(|spec| {
                let data = generate_domain(&spec, &host)?;
                let training = train_adapter(&host, &data.train, &config.trainer, &spec.domain_id)?;
                Ok(PreparedDomain { spec, data, training })
            })
            .collect::<Result<Vec<_>>>()?;

        let dim = prepared[0].spec.embedding_center.dim();
        let records = prepared
            .iter()
            .map(|d| {
                let stored = d
                    .training
                    .adapter
                    .cast::<f32>()
                    .with_metadata("dataset", d.spec.domain_id.clone());
                build_record(d.spec.domain_id.clone(), &d.data.train_embeddings, stored, &RecordOptions::default())
            })
            .collect::<Result<Vec<_>>>()?;
        let library = Library::from_records(dim, records)?;

        let base = host.base_weights();
        let adapted = library
            .records()
            .map(|r| {
                let own = merge_plan_single(r.adapter())?;
                Ok((r.domain_id().to_owned(), apply_fused(&base, &own)?))
            })
            .collect::<Result<BTreeMap<_, _>>>()?;

        let compounds = compound_specs
            .into_iter()
            .enumerate()
            .map(|(j, spec)| {
                let parents = config
                    .compounds
                    .get(j)
                    .map(|c| (domain_id(c.parents.0), domain_id(c.parents.1)))
                    .ok_or_else(|| Error::usage(format!("compound `{}` has no parent entry", spec.domain_id)))?;
                let data = generate_domain(&spec, &host)?;
                Ok(PreparedCompound { spec, data, parents })
            })
            .collect::<Result<Vec<_>>>()?;

        Ok(Self {
            config: config.clone(),
            host,
            domains: prepared,
            compounds,
            library,
            adapted,
        })
    }

    pub fn domain_ids(&self) -> Vec<String> {
        self.domains.iter().map(|d| d.spec.domain_id.clone()).collect()
    }

    fn adapted(&self, id: &str) -> &BTreeMap<String, Matrix<f64>> {
        &self.adapted[id]
    }

    fn late_combine(&self, outputs: &[&Matrix<f64>], weights: &[f64]) -> Result<Matrix<f64>> {
        match self.host.head() {
            Head::Softmax => late_fuse_outputs(outputs, weights),
            Head::Identity => convex_combine(outputs, weights),
        }
    }

    fn fused_outputs(&self, p: &FusionPlan, view: &Library, x: &Matrix<f64>) -> Result<Matrix<f64>> {
        let fused = merge_plan(p, view)?;
        let w = apply_fused(&self.host.base_weights(), &fused)?;
        self.host.outputs_with(&w, x)
    }

    fn held_out(&self, index: usize, config: &FusionConfig) -> Result<HeldOut> {
        let target = &self.domains[index];
        let id = target.spec.domain_id.as_str();
        let log = AccessLog::new();
        let view = self.library.exclude(id)?.with_access_log(log.clone());
        let others: Vec<String> = view.domain_ids();
        let classes = self.host.class_count();
        let base = self.host.base_weights();

        let adapters: Vec<&AdapterSet<f32>> = view.records().map(|r| r.adapter()).collect();
        let uniform = apply_fused(&base, &merge_uniform::<f32, f64>(&adapters)?)?;
        let centroids: Vec<Embedding> = view.records().map(|r| r.centroid().clone()).collect();
        let equal = vec![1.0 / others.len() as f64; others.len()];

        let mut cms: Vec<ConfusionMatrix> = (0..LEAVE_ONE_OUT_METHODS.len()).map(|_| ConfusionMatrix::new(classes)).collect();
        let mut plans = Vec::with_capacity(target.data.test.len());
        let mut distance_pairs = Vec::new();
        let mut support_pairs = Vec::new();
        for img in &target.data.test {
            let x = &img.pixels;
            let zero = self.host.outputs_with(&base, x)?;
            let single: Vec<Matrix<f64>> = others
                .iter()
                .map(|o| self.host.outputs_with(self.adapted(o), x))
                .collect::<Result<_>>()?;
            let p = plan(&img.embedding, &view, config)?;
            let semla = self.fused_outputs(&p, &view, x)?;
            let selected: Vec<&Matrix<f64>> = p
                .selected
                .iter()
                .map(|e| &single[others.iter().position(|o| *o == e.domain_id).expect("plan draws from the view")])
                .collect();
            let semla_late = self.late_combine(&selected, &p.weights())?;
            let uniform_late = self.late_combine(&single.iter().collect::<Vec<_>>(), &equal)?;
            let oracle = self.host.outputs_with(self.adapted(id), x)?;

            let outputs = [&zero, &self.host.outputs_with(&uniform, x)?, &uniform_late, &semla, &semla_late, &oracle];
            for (cm, out) in cms.iter_mut().zip(outputs) {
                for (t, pr) in img.labels.iter().zip(argmax_rows(out)) {
                    cm.add(*t, pr)?;
                }
            }
            let zero_acc = pixel_accuracy(&argmax_rows(&zero), &img.labels);
            for (c, out) in centroids.iter().zip(&single) {
                let gain = pixel_accuracy(&argmax_rows(out), &img.labels) - zero_acc;
                distance_pairs.push((img.embedding.euclidean(c), gain));
            }
            support_pairs.push((
                support_score(&p, config.epsilon_exact),
                pixel_accuracy(&argmax_rows(&semla), &img.labels),
            ));
            plans.push(p);
        }
        Ok(HeldOut {
            domain: id.to_owned(),
            miou: cms.iter().map(ConfusionMatrix::miou).collect::<Result<_>>()?,
            accuracy: cms.iter().map(ConfusionMatrix::accuracy).collect(),
            plans,
            distance_pairs,
            support_pairs,
            touches: log.count(id),
        })
    }

    /// Leave-one-out protocol: each domain is evaluated with its own adapter
    /// removed from the library. The oracle column uses the removed adapter.
    pub fn run_leave_one_out(&self, config: &FusionConfig) -> Result<LeaveOneOutReport> {
        config.validate()?;
        let results = (0..self.domains.len())
            .into_par_iter()
            .map(|i| self.held_out(i, config))
            .collect::<Result<Vec<_>>>()?;
        let methods: Vec<String> = LEAVE_ONE_OUT_METHODS.iter().map(|s| s.to_string()).collect();
        let mut miou = MetricTable::new(methods.clone());
        let mut accuracy = MetricTable::new(methods);
        let mut contrib = ContributionAccumulator::new(self.domain_ids());
        let mut report_plans = Vec::new();
        let mut distance_pairs = Vec::new();
        let mut support_pairs = Vec::new();
        let mut held_out_touches = 0;
        for r in results {
            miou.push(r.domain.clone(), r.miou);
            accuracy.push(r.domain.clone(), r.accuracy);
            contrib.mark_absent(&r.domain, &r.domain);
            for (i, p) in r.plans.into_iter().enumerate() {
                contrib.add(&r.domain, &p);
                report_plans.push((r.domain.clone(), i, p));
            }
            distance_pairs.extend(r.distance_pairs);
            support_pairs.extend(r.support_pairs);
            held_out_touches += r.touches;
        }
        Ok(LeaveOneOutReport {
            miou,
            accuracy,
            contributions: contrib.finish()?,
            plans: report_plans,
            distance_pairs,
            support_pairs,
            held_out_touches,
        })
    }

    /// SemLA-only leave-one-out h-mean of mIoU.
    pub fn semla_h_mean(&self, config: &FusionConfig) -> Result<f64> {
        config.validate()?;
        let classes = self.host.class_count();
        let per_domain = self
            .domains
            .par_iter()
            .map(|d| {
                let view = self.library.exclude(&d.spec.domain_id)?;
                let mut cm = ConfusionMatrix::new(classes);
                for img in &d.data.test {
                    let p = plan(&img.embedding, &view, config)?;
                    let out = self.fused_outputs(&p, &view, &img.pixels)?;
                    for (t, pr) in img.labels.iter().zip(argmax_rows(&out)) {
                        cm.add(*t, pr)?;
                    }
                }
                cm.miou()
            })
            .collect::<Result<Vec<_>>>()?;
        harmonic_mean(&per_domain)
    }

    /// Full factorial K × τ grid of SemLA leave-one-out h-means, in row-major (K outer) order.
    pub fn sweep_hyperparameters(&self, top_k: &[usize], temperature: &[f64]) -> Result<Vec<SweepCell>> {
        if top_k.is_empty() || temperature.is_empty() {
            return Err(Error::usage("sweep grids must be non-empty"));
        }
        let mut cells = Vec::with_capacity(top_k.len() * temperature.len());
        for &k in top_k {
            for &t in temperature {
                let cfg = FusionConfig {
                    top_k: k,
                    temperature: t,
                    ..self.config.fusion
                };
                cells.push(SweepCell {
                    top_k: k,
                    temperature: t,
                    h_mean: self.semla_h_mean(&cfg)?,
                });
            }
        }
        Ok(cells)
    }

    /// All-inclusive protocol: the target's own adapter stays in the library.
    /// Columns: oracle, SemLA at each temperature, uniform merge.
    pub fn run_all_inclusive(&self, temperatures: &[f64]) -> Result<AllInclusiveReport> {
        if temperatures.is_empty() {
            return Err(Error::usage("at least one temperature is required"));
        }
        let classes = self.host.class_count();
        let base = self.host.base_weights();
        let adapters: Vec<&AdapterSet<f32>> = self.library.records().map(|r| r.adapter()).collect();
        let uniform = apply_fused(&base, &merge_uniform::<f32, f64>(&adapters)?)?;
        let configs = temperatures
            .iter()
            .map(|&t| {
                let c = FusionConfig {
                    temperature: t,
                    ..self.config.fusion
                };
                c.validate().map(|_| c)
            })
            .collect::<Result<Vec<_>>>()?;

        let rows = self
            .domains
            .par_iter()
            .map(|d| {
                let id = d.spec.domain_id.as_str();
                let mut cms: Vec<ConfusionMatrix> = (0..configs.len() + 2).map(|_| ConfusionMatrix::new(classes)).collect();
                let mut gaps = vec![0.0f64; configs.len()];
                for img in &d.data.test {
                    let x = &img.pixels;
                    let oracle = self.host.outputs_with(self.adapted(id), x)?;
                    let mut outs = vec![oracle.clone()];
                    for (g, cfg) in gaps.iter_mut().zip(&configs) {
                        let p = plan(&img.embedding, &self.library, cfg)?;
                        let out = self.fused_outputs(&p, &self.library, x)?;
                        *g = g.max(out.max_abs_diff(&oracle)?);
                        outs.push(out);
                    }
                    outs.push(self.host.outputs_with(&uniform, x)?);
                    for (cm, out) in cms.iter_mut().zip(&outs) {
                        for (t, pr) in img.labels.iter().zip(argmax_rows(out)) {
                            cm.add(*t, pr)?;
                        }
                    }
                }
                let miou = cms.iter().map(ConfusionMatrix::miou).collect::<Result<Vec<_>>>()?;
                Ok((id.to_owned(), miou, gaps))
            })
            .collect::<Result<Vec<_>>>()?;

        let mut methods = vec![ORACLE.to_string()];
        methods.extend(temperatures.iter().map(|t| format!("{SEMLA}@{t}")));
        methods.push(UNIFORM.to_string());
        let mut table = MetricTable::new(methods);
        let mut oracle_gap: Vec<(f64, f64)> = temperatures.iter().map(|&t| (t, 0.0)).collect();
        for (id, miou, gaps) in rows {
            table.push(id, miou);
            for (acc, g) in oracle_gap.iter_mut().zip(gaps) {
                acc.1 = acc.1.max(g);
            }
        }
        Ok(AllInclusiveReport {
            miou: table,
            oracle_gap,
        })
    }

    /// Mean fusion weights for each compound domain over the full library.
    pub fn compound_analysis(&self, config: &FusionConfig) -> Result<Vec<CompoundReport>> {
        config.validate()?;
        self.compounds
            .iter()
            .map(|c| {
                let mut acc = ContributionAccumulator::new(self.domain_ids());
                for img in &c.data.test {
                    acc.add(&c.spec.domain_id, &plan(&img.embedding, &self.library, config)?);
                }
                let matrix = acc.finish()?;
                let ranked = matrix.ranked(&c.spec.domain_id);
                let weight = |id: &str| matrix.cell(&c.spec.domain_id, id).unwrap_or(0.0);
                let parent_share = weight(&c.parents.0) + weight(&c.parents.1);
                let top: Vec<&str> = ranked.iter().take(2).map(|(id, _)| id.as_str()).collect();
                let parents_lead = top.len() == 2
                    && top.contains(&c.parents.0.as_str())
                    && top.contains(&c.parents.1.as_str());
                Ok(CompoundReport {
                    domain_id: c.spec.domain_id.clone(),
                    parents: c.parents.clone(),
                    ranked,
                    parent_share,
                    parents_lead,
                })
            })
            .collect()
    }

    /// Largest absolute difference between parameter-fused and late-fused
    /// pre-head outputs over every leave-one-out query. Zero up to rounding
    /// for a single-layer host, nonzero in general.
    pub fn late_fusion_logit_gap(&self, config: &FusionConfig) -> Result<f64> {
        config.validate()?;
        let base = self.host.base_weights();
        let gaps = self
            .domains
            .par_iter()
            .map(|d| {
                let view = self.library.exclude(&d.spec.domain_id)?;
                let mut gap = 0.0f64;
                for img in &d.data.test {
                    let p = plan(&img.embedding, &view, config)?;
                    let fused = apply_fused(&base, &merge_plan(&p, &view)?)?;
                    let param = self.host.logits_with(&fused, &img.pixels)?;
                    let singles = p
                        .selected
                        .iter()
                        .map(|e| self.host.logits_with(self.adapted(&e.domain_id), &img.pixels))
                        .collect::<Result<Vec<_>>>()?;
                    let late = convex_combine(&singles.iter().collect::<Vec<_>>(), &p.weights())?;
                    gap = gap.max(param.max_abs_diff(&late)?);
                }
                Ok(gap)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(gaps.into_iter().fold(0.0, f64::max))
    }

    /// Training-embedding centroid of a library domain.
    pub fn centroid(&self, id: &str) -> Option<&Embedding> {
        self.library.get(id).map(|r| r.centroid())
    }

    /// Test embeddings of a library domain.
    pub fn test_embeddings(&self, id: &str) -> Option<Vec<Embedding>> {
        self.domains
            .iter()
            .find(|d| d.spec.domain_id == id)
            .map(|d| d.data.test.iter().map(|t| t.embedding.clone()).collect())
    }
}

fn merge_plan_single(adapter: &AdapterSet<f32>) -> Result<crate::fusion::FusedAdapter<f64>> {
    crate::fusion::merge_concat::<f32, f64>(&[adapter], &[1.0])
}

/// Leave-one-out over explicit specs with a freshly built host.
pub fn run_leave_one_out(domains: Vec<SyntheticDomainSpec>, config: &BenchmarkConfig) -> Result<LeaveOneOutReport> {
    let host = config.build_host()?;
    let bench = Benchmark::from_specs(config, host, domains, Vec::new())?;
    bench.run_leave_one_out(&config.fusion)
}

/// All-inclusive run over explicit specs.
pub fn run_all_inclusive(domains: Vec<SyntheticDomainSpec>, config: &BenchmarkConfig) -> Result<AllInclusiveReport> {
    let host = config.build_host()?;
    let bench = Benchmark::from_specs(config, host, domains, Vec::new())?;
    bench.run_all_inclusive(&config.all_inclusive_temperatures)
}

/// Sweep over explicit specs.
pub fn sweep_hyperparameters(
    domains: Vec<SyntheticDomainSpec>,
    config: &BenchmarkConfig,
    top_k: &[usize],
    temperature: &[f64],
) -> Result<Vec<SweepCell>> {
    let host = config.build_host()?;
    let bench = Benchmark::from_specs(config, host, domains, Vec::new())?;
    bench.sweep_hyperparameters(top_k, temperature)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::OnceLock;

    fn small_config(seed: u64) -> BenchmarkConfig {
        let mut c = BenchmarkConfig {
            seed,
            ..BenchmarkConfig::default()
        };
        c.samples.n_test = 6;
        c.trainer.steps = 200;
        c
    }

    fn shared() -> &'static Benchmark {
        static BENCH: OnceLock<Benchmark> = OnceLock::new();
        BENCH.get_or_init(|| Benchmark::prepare(&small_config(3)).unwrap())
    }

    #[test]
    fn default_geometry_has_ten_domains_and_distinct_axes() {
        let c = BenchmarkConfig::default();
        let host = c.build_host().unwrap();
        let (domains, compounds) = c.domain_specs(&host).unwrap();
        assert_eq!(domains.len(), 10);
        assert_eq!(compounds.len(), c.compounds.len());
        assert_eq!(domains[3].domain_id, "d03");
        assert_eq!(compounds[1].domain_id, "mix-d04-d05");
        let a = &domains[0].embedding_center;
        let b = &domains[1].embedding_center;
        let mid = &compounds[0].embedding_center;
        for ((x, y), m) in a.values().iter().zip(b.values()).zip(mid.values()) {
            assert!((0.5 * (x + y) - m).abs() < 1e-12);
        }
    }

    #[test]
    fn compound_target_is_mix_of_parent_targets() {
        let c = BenchmarkConfig::default();
        let host = c.build_host().unwrap();
        let (domains, compounds) = c.domain_specs(&host).unwrap();
        let mut expect = domains[4].target_map.scaled(0.6);
        expect.axpy(0.4, &domains[5].target_map).unwrap();
        assert!(expect.max_abs_diff(&compounds[1].target_map).unwrap() < 1e-12);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = BenchmarkConfig::default();
        c.geometry = GeometryConfig { group_sizes: vec![1, 1], ..c.geometry };
        assert!(c.validate().is_err());
        let c = BenchmarkConfig {
            compounds: vec![CompoundSpec { parents: (2, 2), mix: 0.5 }],
            ..BenchmarkConfig::default()
        };
        assert!(c.validate().is_err());
        let mut c = BenchmarkConfig::default();
        c.geometry.embedding_dim = 8;
        assert!(c.validate().is_err());
        let c = BenchmarkConfig {
            all_inclusive_temperatures: vec![0.0],
            ..BenchmarkConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn seeds_are_stream_separated() {
        let mut seen = std::collections::BTreeSet::new();
        for stream in 0..4 {
            for index in 0..16 {
                assert!(seen.insert(derive_seed(5, stream, index)));
            }
        }
        assert_ne!(derive_seed(0, 0, 0), derive_seed(1, 0, 0));
    }

    #[test]
    fn leave_one_out_schema_and_hygiene() {
        let b = shared();
        let r = b.run_leave_one_out(&b.config.fusion).unwrap();
        assert_eq!(r.miou.methods, LEAVE_ONE_OUT_METHODS.map(String::from).to_vec());
        assert_eq!(r.miou.domains.len(), 10);
        assert_eq!(r.held_out_touches, 0);
        for (i, id) in r.contributions.rows.iter().enumerate() {
            assert_eq!(r.contributions.cell(id, id), None);
            assert!((r.contributions.row_sum(i) - 1.0).abs() < 1e-6);
        }
        assert!(r.plans.iter().all(|(d, _, p)| p.weight_of(d) == 0.0 && p.selected.len() == 7));
        assert_eq!(r.support_pairs.len(), 10 * 6);
        assert_eq!(r.distance_pairs.len(), 10 * 6 * 9);
    }

    #[test]
    fn oracle_at_least_zero_shot_on_every_domain() {
        for seed in [3, 11] {
            let b = if seed == 3 {
                shared().clone()
            } else {
                Benchmark::prepare(&small_config(seed)).unwrap()
            };
            let r = b.run_leave_one_out(&b.config.fusion).unwrap();
            for d in &r.miou.domains {
                let oracle = r.miou.get(d, ORACLE).unwrap();
                let zero = r.miou.get(d, ZERO_SHOT).unwrap();
                assert!(oracle >= zero, "seed {seed} domain {d}: {oracle} < {zero}");
            }
        }
    }

    #[test]
    fn identical_domains_tie() {
        let mut config = small_config(1);
        config.compounds.clear();
        let host = config.build_host().unwrap();
        let (domains, _) = config.domain_specs(&host).unwrap();
        let clones: Vec<SyntheticDomainSpec> = (0..4)
            .map(|i| SyntheticDomainSpec {
                domain_id: domain_id(i),
                ..domains[0].clone()
            })
            .collect();
        let r = run_leave_one_out(clones, &config).unwrap();
        for d in &r.miou.domains {
            let row: Vec<f64> = LEAVE_ONE_OUT_METHODS[1..].iter().map(|m| r.miou.get(d, m).unwrap()).collect();
            let lo = row.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(hi - lo <= 0.01, "{d}: {row:?}");
            assert!(r.miou.get(d, ZERO_SHOT).unwrap() < lo);
        }
    }

    fn nearest(query: &Embedding, view: &Library) -> String {
        let mut best: Option<(f64, &str)> = None;
        for r in view.records() {
            let d = query.euclidean(r.centroid());
            if best.is_none_or(|(bd, bid)| d < bd || (d == bd && r.domain_id() < bid)) {
                best = Some((d, r.domain_id()));
            }
        }
        best.unwrap().1.to_owned()
    }

    #[test]
    fn top_one_is_nearest_adapter() {
        let b = shared();
        let cfg = FusionConfig::new(1, 0.05);
        for d in &b.domains {
            let view = b.library.exclude(&d.spec.domain_id).unwrap();
            for img in &d.data.test {
                let p = plan(&img.embedding, &view, &cfg).unwrap();
                let near = nearest(&img.embedding, &view);
                assert_eq!(p.selected[0].domain_id, near);
                let fused = b.fused_outputs(&p, &view, &img.pixels).unwrap();
                let single = b.host.outputs_with(b.adapted(&near), &img.pixels).unwrap();
                assert!(fused.max_abs_diff(&single).unwrap() < 1e-12);
            }
        }
    }

    #[test]
    fn hot_temperature_is_uniform_over_top_k() {
        let b = shared();
        let cfg = FusionConfig::new(4, 1e9);
        let base = b.host.base_weights();
        for d in &b.domains {
            for img in &d.data.test {
                let p = plan(&img.embedding, &b.library, &cfg).unwrap();
                assert!(p.weights().iter().all(|w| (w - 0.25).abs() < 1e-6));
                let chosen: Vec<&AdapterSet<f32>> =
                    p.selected.iter().map(|e| b.library.get(&e.domain_id).unwrap().adapter()).collect();
                let uniform = apply_fused(&base, &merge_uniform::<f32, f64>(&chosen).unwrap()).unwrap();
                let expect = b.host.outputs_with(&uniform, &img.pixels).unwrap();
                let got = b.fused_outputs(&p, &b.library, &img.pixels).unwrap();
                assert!(got.max_abs_diff(&expect).unwrap() < 1e-6);
            }
        }
    }

    #[test]
    fn sweep_cell_matches_leave_one_out() {
        let b = shared();
        let cfg = FusionConfig::new(5, 0.05);
        let loo = b.run_leave_one_out(&cfg).unwrap().miou.h_mean(SEMLA).unwrap();
        let cells = b.sweep_hyperparameters(&[5], &[0.05]).unwrap();
        assert_eq!(cells.len(), 1);
        assert_eq!(cells[0].h_mean, loo);
        assert!(b.sweep_hyperparameters(&[], &[0.05]).is_err());
    }

    #[test]
    fn single_adapter_row_is_flat() {
        let b = shared();
        let cells = b.sweep_hyperparameters(&[1], &[1e-3, 0.01, 0.1, 10.0]).unwrap();
        assert!(cells.iter().all(|c| c.h_mean == cells[0].h_mean));
    }

    #[test]
    fn cold_all_inclusive_matches_oracle() {
        let b = shared();
        let r = b.run_all_inclusive(&[1e-4, 0.05]).unwrap();
        assert_eq!(r.miou.methods, ["oracle", "semla@0.0001", "semla@0.05", "uniform"]);
        assert!(r.oracle_gap[0].1 <= 1e-3, "{:?}", r.oracle_gap);
        assert!(r.oracle_gap[1].1 > r.oracle_gap[0].1);
        for d in &r.miou.domains {
            assert_eq!(r.miou.get(d, "semla@0.0001"), r.miou.get(d, ORACLE));
        }
    }

    #[test]
    fn seeded_runs_are_bit_reproducible() {
        let mut c = small_config(9);
        c.samples.n_test = 3;
        c.trainer.steps = 50;
        let run = || {
            let b = Benchmark::prepare(&c).unwrap();
            let r = b.run_leave_one_out(&c.fusion).unwrap();
            (r.miou, r.accuracy, r.plans, r.support_pairs, b.compound_analysis(&c.fusion).unwrap())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn late_and_parameter_fusion_agree_only_on_a_linear_host() {
        let mut c = small_config(2);
        c.samples.n_test = 4;
        c.trainer.steps = 100;
        c.host.hidden_dims = vec![];
        c.host.head = Head::Identity;
        let linear = Benchmark::prepare(&c).unwrap();
        assert!(linear.late_fusion_logit_gap(&c.fusion).unwrap() <= 1e-9);
        let r = linear.run_leave_one_out(&c.fusion).unwrap();
        assert_eq!(r.miou.column(SEMLA), r.miou.column(SEMLA_LATE));

        c.host.hidden_dims = vec![16];
        let deep = Benchmark::prepare(&c).unwrap();
        assert!(deep.late_fusion_logit_gap(&c.fusion).unwrap() > 1e-6);
    }
}
