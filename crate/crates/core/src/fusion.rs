//! Test-time adapter retrieval and merging.
//!
//! For a query embedding: measure its distance to every library centroid,
//! keep the `K` closest, weight them with a temperature softmax over inverse
//! distances, and merge the selected adapters by stacking weighted `A`
//! factors and concatenating `B` factors. The merged factors satisfy
//! `B_fused A_fused = Σ w_i B_i A_i`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::library::{DomainRecord, Embedding, Library};
use crate::scalar::Scalar;
use crate::tensor::{AdapterSet, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceMetric {
    Euclidean,
    Cosine,
    Mahalanobis,
}

impl fmt::Display for DistanceMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DistanceMetric::Euclidean => "euclidean",
            DistanceMetric::Cosine => "cosine",
            DistanceMetric::Mahalanobis => "mahalanobis",
        })
    }
}

impl FromStr for DistanceMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "euclidean" => Ok(Self::Euclidean),
            "cosine" => Ok(Self::Cosine),
            "mahalanobis" => Ok(Self::Mahalanobis),
            other => Err(Error::usage(format!(
                "unknown distance metric `{other}` (expected euclidean, cosine or mahalanobis)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub top_k: usize,
    pub temperature: f64,
    pub metric: DistanceMetric,
    /// Distances at or below this count as exact matches.
    pub epsilon_exact: f64,
    pub normalize_query: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            top_k: 7,
            temperature: 0.01,
            metric: DistanceMetric::Euclidean,
            epsilon_exact: 1e-12,
            normalize_query: false,
        }
    }
}

impl FusionConfig {
    pub fn new(top_k: usize, temperature: f64) -> Self {
        Self {
            top_k,
            temperature,
            ..Self::default()
        }
    }

    pub fn with_metric(mut self, metric: DistanceMetric) -> Self {
        self.metric = metric;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 {
            return Err(Error::usage("top_k must be at least 1"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::usage(format!(
                "temperature must be positive and finite, got {}",
                self.temperature
            )));
        }
        if !(self.epsilon_exact > 0.0 && self.epsilon_exact.is_finite()) {
            return Err(Error::usage(format!(
                "epsilon_exact must be positive, got {}",
                self.epsilon_exact
            )));
        }
        Ok(())
    }
}

/// One selected adapter in a plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub domain_id: String,
    pub distance: f64,
    pub weight: f64,
}

/// Which adapters a query selected and how much each one counts.
///
/// Entries are ordered by ascending distance (ties by domain id).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionPlan {
    pub query_digest: String,
    pub metric: DistanceMetric,
    pub temperature: f64,
    pub top_k: usize,
    pub selected: Vec<PlanEntry>,
}

impl FusionPlan {
    pub fn weights(&self) -> Vec<f64> {
        self.selected.iter().map(|e| e.weight).collect()
    }

    pub fn distances(&self) -> Vec<f64> {
        self.selected.iter().map(|e| e.distance).collect()
    }

    pub fn weight_of(&self, domain_id: &str) -> f64 {
        self.selected
            .iter()
            .find(|e| e.domain_id == domain_id)
            .map_or(0.0, |e| e.weight)
    }

    /// `Σ w_i c_i` over the selected records.
    pub fn weighted_centroid(&self, lib: &Library) -> Result<Embedding> {
        let mut acc = vec![0.0; lib.embedding_dim()];
        for e in &self.selected {
            let r = lib
                .get(&e.domain_id)
                .ok_or_else(|| Error::usage(format!("plan refers to unknown domain `{}`", e.domain_id)))?;
            for (a, c) in acc.iter_mut().zip(r.centroid().values()) {
                *a += e.weight * c;
            }
        }
        Embedding::new(acc)
    }

    /// Short digest of ids and weight bit patterns.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for e in &self.selected {
            h.update(e.domain_id.as_bytes());
            h.update([0]);
            h.update(e.weight.to_le_bytes());
        }
        hex::encode(&h.finalize()[..8])
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plan serialises")
    }
}

/// Distance from `query` to a record's centroid.
///
/// Mahalanobis needs a record with a covariance; asking for it on an
/// ineligible record is a usage error here (candidate selection skips such
/// records instead).
pub fn distance(query: &Embedding, record: &DomainRecord, metric: DistanceMetric) -> Result<f64> {
    let c = record.centroid();
    query.check_dim(c.dim())?;
    match metric {
        DistanceMetric::Euclidean => Ok(query.euclidean(c)),
        DistanceMetric::Cosine => {
            let (nq, nc) = (query.norm(), c.norm());
            if nq == 0.0 || nc == 0.0 {
                return Err(Error::usage(format!(
                    "cosine distance is undefined for a zero-norm vector (domain `{}`)",
                    record.domain_id()
                )));
            }
            Ok((1.0 - query.dot(c) / (nq * nc)).max(0.0))
        }
        DistanceMetric::Mahalanobis => {
            let cov = record.covariance().ok_or_else(|| {
                Error::usage(format!(
                    "domain `{}` has no covariance; it is not eligible for Mahalanobis distance",
                    record.domain_id()
                ))
            })?;
            let diff: Vec<f64> = query.values().iter().zip(c.values()).map(|(q, c)| q - c).collect();
            cov.mahalanobis_norm(&diff)
        }
    }
}

/// A record with its distance to the current query.
#[derive(Debug, Clone, Copy)]
pub struct Candidate<'a> {
    pub record: &'a DomainRecord,
    pub distance: f64,
}

/// The `min(K, M)` closest eligible records, ascending by distance, ties by domain id.
pub fn select_top_k<'a>(query: &Embedding, lib: &'a Library, config: &FusionConfig) -> Result<Vec<Candidate<'a>>> {
    config.validate()?;
    if lib.is_empty() {
        return Err(Error::usage("cannot query an empty library"));
    }
    let normalized;
    let query = if config.normalize_query {
        normalized = query.normalized()?;
        &normalized
    } else {
        query
    };
    let mut candidates = Vec::with_capacity(lib.len());
    for record in lib.records() {
        if config.metric == DistanceMetric::Mahalanobis && !record.mahalanobis_eligible() {
            continue;
        }
        let d = distance(query, record, config.metric)?;
        candidates.push(Candidate { record, distance: d });
    }
    if candidates.is_empty() {
        return Err(Error::usage(format!(
            "no library record is eligible for the {} metric",
            config.metric
        )));
    }
    candidates.sort_by(|a, b| {
        a.distance
            .total_cmp(&b.distance)
            .then_with(|| a.record.domain_id().cmp(b.record.domain_id()))
    });
    candidates.truncate(config.top_k);
    Ok(candidates)
}

/// Temperature softmax over inverse distances: `w_i ∝ exp(1 / (d_i τ))`.
///
/// Distances at or below `epsilon_exact` are exact matches: they share the
/// whole mass uniformly and everything else gets zero.
pub fn compute_weights<T: Scalar>(distances: &[T], temperature: T, epsilon_exact: T) -> Result<Vec<T>> {
    if distances.is_empty() {
        return Err(Error::usage("cannot weight an empty candidate list"));
    }
    if !(temperature > T::zero() && temperature.is_finite()) {
        return Err(Error::usage(format!("temperature must be positive, got {temperature}")));
    }
    if let Some(d) = distances.iter().find(|d| !(**d >= T::zero())) {
        return Err(Error::usage(format!("distances must be nonnegative, got {d}")));
    }

    let exact: Vec<bool> = distances.iter().map(|&d| d <= epsilon_exact).collect();
    let scores: Vec<T> = distances.iter().map(|&d| T::one() / (d * temperature)).collect();
    // Exact matches, or scores so large they overflow, take all the mass.
    let dominant: Vec<bool> = if exact.iter().any(|&e| e) {
        exact
    } else {
        scores.iter().map(|s| s.is_infinite()).collect()
    };
    let n_dominant = dominant.iter().filter(|&&b| b).count();
    if n_dominant > 0 {
        let share = T::one() / T::of(n_dominant as f64);
        return Ok(dominant.iter().map(|&b| if b { share } else { T::zero() }).collect());
    }

    let max = scores.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = scores.iter().map(|&s| (s - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Merged factors for one layer: `B_fused` is `d × rK'`, `A_fused` is `rK' × k`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedLayer<T> {
    pub b: Matrix<T>,
    pub a: Matrix<T>,
    /// Rank of each constituent adapter.
    pub rank: usize,
    /// `alpha / rank` of the first constituent; the others are folded into their `A` blocks.
    pub scaling: f64,
}

impl<T: Scalar> FusedLayer<T> {
    pub fn delta(&self, apply_scaling: bool) -> Matrix<T> {
        let ba = self.b.matmul(&self.a).expect("fused factor shapes agree");
        if apply_scaling {
            ba.scaled(T::of(self.scaling))
        } else {
            ba
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedAdapter<T> {
    pub layers: BTreeMap<String, FusedLayer<T>>,
    pub plan: Option<FusionPlan>,
    /// Number of adapters merged (`K'`).
    pub merged: usize,
}

impl<T: Scalar> FusedAdapter<T> {
    /// Scaled per-layer deltas.
    pub fn deltas(&self) -> BTreeMap<String, Matrix<T>> {
        self.layers.iter().map(|(k, l)| (k.clone(), l.delta(true))).collect()
    }

    pub fn cast<U: Scalar>(&self) -> FusedAdapter<U> {
        FusedAdapter {
            layers: self
                .layers
                .iter()
                .map(|(k, l)| {
                    (
                        k.clone(),
                        FusedLayer {
                            b: l.b.cast(),
                            a: l.a.cast(),
                            rank: l.rank,
                            scaling: l.scaling,
                        },
                    )
                })
                .collect(),
            plan: self.plan.clone(),
            merged: self.merged,
        }
    }
}

/// Concatenation merge: `A_fused = [w_1 A_1; …; w_K A_K]`, `B_fused = [B_1, …, B_K]`.
///
/// Inputs may be stored at a different precision than the output; entries
/// are converted before any arithmetic.
pub fn merge_concat<S: Scalar, T: Scalar>(adapters: &[&AdapterSet<S>], weights: &[T]) -> Result<FusedAdapter<T>> {
    let first = adapters
        .first()
        .ok_or_else(|| Error::usage("cannot merge an empty adapter selection"))?;
    if adapters.len() != weights.len() {
        return Err(Error::usage(format!(
            "{} adapters but {} weights",
            adapters.len(),
            weights.len()
        )));
    }
    for other in &adapters[1..] {
        first.check_compatible(other)?;
    }

    let mut layers = BTreeMap::new();
    for reference in first.layers() {
        let name = reference.layer_name();
        let scaling = reference.scaling();
        let mut bs = Vec::with_capacity(adapters.len());
        let mut as_ = Vec::with_capacity(adapters.len());
        for (adapter, &w) in adapters.iter().zip(weights) {
            let pair = adapter.layer(name).expect("layouts checked above");
            let factor = w * T::of(pair.scaling() / scaling);
            bs.push(pair.b().cast::<T>());
            as_.push(pair.a().cast::<T>().scaled(factor));
        }
        let b = Matrix::hstack(&bs.iter().collect::<Vec<_>>())?;
        let a = Matrix::vstack(&as_.iter().collect::<Vec<_>>())?;
        layers.insert(
            name.to_owned(),
            FusedLayer {
                b,
                a,
                rank: reference.rank(),
                scaling,
            },
        );
    }
    Ok(FusedAdapter {
        layers,
        plan: None,
        merged: adapters.len(),
    })
}

/// Equal-weight merge of every given adapter.
pub fn merge_uniform<S: Scalar, T: Scalar>(adapters: &[&AdapterSet<S>]) -> Result<FusedAdapter<T>> {
    if adapters.is_empty() {
        return Err(Error::usage("cannot merge an empty adapter selection"));
    }
    let w = T::one() / T::of(adapters.len() as f64);
    merge_concat(adapters, &vec![w; adapters.len()])
}

/// Selection and weighting only; no tensors are touched.
pub fn plan(query: &Embedding, lib: &Library, config: &FusionConfig) -> Result<FusionPlan> {
    let candidates = select_top_k(query, lib, config)?;
    let distances: Vec<f64> = candidates.iter().map(|c| c.distance).collect();
    let weights = compute_weights(&distances, config.temperature, config.epsilon_exact)?;
    Ok(FusionPlan {
        query_digest: query.digest(),
        metric: config.metric,
        temperature: config.temperature,
        top_k: config.top_k,
        selected: candidates
            .iter()
            .zip(weights)
            .map(|(c, w)| PlanEntry {
                domain_id: c.record.domain_id().to_owned(),
                distance: c.distance,
                weight: w,
            })
            .collect(),
    })
}

/// Merges the adapters a plan names, with the plan's weights.
pub fn merge_plan(plan: &FusionPlan, lib: &Library) -> Result<FusedAdapter<f64>> {
    let adapters = plan
        .selected
        .iter()
        .map(|e| {
            lib.get(&e.domain_id)
                .map(DomainRecord::adapter)
                .ok_or_else(|| Error::usage(format!("plan refers to unknown domain `{}`", e.domain_id)))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut fused = merge_concat(&adapters, &plan.weights())?;
    fused.plan = Some(plan.clone());
    Ok(fused)
}

/// Full pipeline: distances, top-K, softmax weights, concatenation merge.
pub fn fuse(query: &Embedding, lib: &Library, config: &FusionConfig) -> Result<FusedAdapter<f64>> {
    let plan = plan(query, lib, config)?;
    merge_plan(&plan, lib)
}

/// `W' = W + (alpha / r) B_fused A_fused` for every base layer the adapter touches.
/// Base layers without an adapter pass through unchanged.
pub fn apply_fused<T: Scalar>(
    base: &BTreeMap<String, Matrix<T>>,
    fused: &FusedAdapter<T>,
) -> Result<BTreeMap<String, Matrix<T>>> {
    if let Some(name) = fused.layers.keys().find(|k| !base.contains_key(*k)) {
        return Err(Error::structural(format!("fused adapter targets unknown layer `{name}`")));
    }
    base.iter()
        .map(|(name, w)| {
            let updated = match fused.layers.get(name) {
                Some(layer) => w
                    .add(&layer.delta(true))
                    .map_err(|e| Error::structural(format!("layer `{name}`: {e}")))?,
                None => w.clone(),
            };
            Ok((name.clone(), updated))
        })
        .collect()
}

/// `Σ w_i Y_i` over same-shaped outputs, with no constraint on the rows.
pub fn convex_combine<T: Scalar>(outputs: &[&Matrix<T>], weights: &[T]) -> Result<Matrix<T>> {
    let first = outputs
        .first()
        .ok_or_else(|| Error::usage("cannot combine zero outputs"))?;
    if outputs.len() != weights.len() {
        return Err(Error::usage(format!(
            "{} outputs but {} weights",
            outputs.len(),
            weights.len()
        )));
    }
    let mut acc = Matrix::zeros(first.rows(), first.cols());
    for (out, &w) in outputs.iter().zip(weights) {
        acc.axpy(w, out)?;
    }
    Ok(acc)
}

/// Late fusion of per-adapter class distributions (rows = samples, cols = classes).
pub fn late_fuse_outputs<T: Scalar>(outputs: &[&Matrix<T>], weights: &[T]) -> Result<Matrix<T>> {
    let tol = T::of(1e-6);
    for (i, out) in outputs.iter().enumerate() {
        for r in 0..out.rows() {
            let s: T = out.row(r).iter().copied().sum();
            if (s - T::one()).abs() > tol || out.row(r).iter().any(|&p| p < T::zero()) {
                return Err(Error::usage(format!(
                    "output {i} row {r} is not a probability distribution (sums to {s})"
                )));
            }
        }
    }
    convex_combine(outputs, weights)
}
