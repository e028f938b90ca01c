//! Deployment policies that avoid re-fusing adapters for every input.
//!
//! - [`StreamState`]: keeps an exponential moving average of query
//!   embeddings and re-fuses only when the average drifts farther than a
//!   threshold from the plan-weighted centroid of the active adapters.
//! - [`batch_cluster_fuse`]: clusters a batch of embeddings with k-means and
//!   runs one fusion per cluster.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{fuse, FusedAdapter, FusionConfig, FusionPlan};
use crate::library::{Embedding, Library};
use crate::metrics::support_score;

pub const DEFAULT_BETA: f64 = 0.9;
pub const KMEANS_ITERATIONS: usize = 25;

/// One emitted line of a stream run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamEvent {
    pub step: usize,
    pub swapped: bool,
    pub plan_digest: String,
    pub support_score: f64,
}

#[derive(Debug, Clone)]
pub struct StreamState {
    ema: Option<Embedding>,
    beta: f64,
    swap_threshold: f64,
    active_plan: Option<FusionPlan>,
    reference: Option<Embedding>,
    swap_count: usize,
}

impl StreamState {
    /// `beta` is the EMA decay in `[0, 1)`; `swap_threshold` may be `+inf` (never swap after the first fusion).
    pub fn new(beta: f64, swap_threshold: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&beta) {
            return Err(Error::usage(format!("beta must lie in [0, 1), got {beta}")));
        }
        if swap_threshold.is_nan() || swap_threshold < 0.0 {
            return Err(Error::usage(format!(
                "swap threshold must be nonnegative, got {swap_threshold}"
            )));
        }
        Ok(Self {
            ema: None,
            beta,
            swap_threshold,
            active_plan: None,
            reference: None,
            swap_count: 0,
        })
    }

    pub fn ema(&self) -> Option<&Embedding> {
        self.ema.as_ref()
    }

    pub fn active_plan(&self) -> Option<&FusionPlan> {
        self.active_plan.as_ref()
    }

    /// Number of fusions performed so far, the initial one included.
    pub fn swap_count(&self) -> usize {
        self.swap_count
    }

    /// `ema' = beta * ema + (1 - beta) * e`. The first observation initialises the average.
    pub fn ema_update(&self, e: &Embedding) -> Result<Self> {
        let mut next = self.clone();
        next.update_ema_in_place(e)?;
        Ok(next)
    }

    fn update_ema_in_place(&mut self, e: &Embedding) -> Result<()> {
        self.ema = Some(match &self.ema {
            None => e.clone(),
            Some(prev) => {
                e.check_dim(prev.dim())?;
                let b = self.beta;
                Embedding::new(
                    prev.values()
                        .iter()
                        .zip(e.values())
                        .map(|(p, x)| b * p + (1.0 - b) * x)
                        .collect(),
                )?
            }
        });
        Ok(())
    }

    /// Re-fuses at the current EMA if there is no active plan yet, or if the
    /// EMA is farther than the threshold from the active plan's weighted centroid.
    pub fn maybe_refuse(mut self, lib: &Library, config: &FusionConfig) -> Result<(Self, Option<FusedAdapter<f64>>)> {
        let ema = self
            .ema
            .clone()
            .ok_or_else(|| Error::usage("no embedding observed yet"))?;
        ema.check_dim(lib.embedding_dim())?;
        let trigger = match &self.reference {
            None => true,
            Some(reference) => ema.euclidean(reference) > self.swap_threshold,
        };
        if !trigger {
            return Ok((self, None));
        }
        let fused = fuse(&ema, lib, config)?;
        let plan = fused.plan.clone().expect("fuse attaches its plan");
        self.reference = Some(plan.weighted_centroid(lib)?);
        self.active_plan = Some(plan);
        self.swap_count += 1;
        Ok((self, Some(fused)))
    }

    /// EMA update followed by [`maybe_refuse`](Self::maybe_refuse), with the event to emit.
    pub fn step(
        self,
        step: usize,
        e: &Embedding,
        lib: &Library,
        config: &FusionConfig,
    ) -> Result<(Self, StreamEvent, Option<FusedAdapter<f64>>)> {
        let mut state = self;
        state.update_ema_in_place(e)?;
        let (state, fused) = state.maybe_refuse(lib, config)?;
        let plan = state.active_plan.as_ref().expect("a plan exists after the first step");
        let event = StreamEvent {
            step,
            swapped: fused.is_some(),
            plan_digest: plan.digest(),
            support_score: support_score(plan, config.epsilon_exact),
        };
        Ok((state, event, fused))
    }
}

/// Runs a whole stream and returns the per-step events and the final state.
pub fn run_stream(
    embeddings: &[Embedding],
    lib: &Library,
    config: &FusionConfig,
    beta: f64,
    swap_threshold: f64,
) -> Result<(Vec<StreamEvent>, StreamState)> {
    let mut state = StreamState::new(beta, swap_threshold)?;
    let mut events = Vec::with_capacity(embeddings.len());
    for (i, e) in embeddings.iter().enumerate() {
        let (next, event, _) = state.step(i, e, lib, config)?;
        state = next;
        events.push(event);
    }
    Ok((events, state))
}

/// k-means result with one fused adapter per cluster.
#[derive(Debug, Clone)]
pub struct BatchFusion {
    /// Cluster index per input embedding.
    pub assignment: Vec<usize>,
    pub centroids: Vec<Embedding>,
    pub fused: Vec<FusedAdapter<f64>>,
}

impl BatchFusion {
    pub fn fuse_calls(&self) -> usize {
        self.fused.len()
    }

    pub fn adapter_for(&self, index: usize) -> &FusedAdapter<f64> {
        &self.fused[self.assignment[index]]
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centers: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in centers.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    best
}

/// Lloyd's k-means with seeded farthest-point initialisation and a fixed
/// number of iterations. Returns `(assignment, centers)`.
pub fn kmeans(points: &[Embedding], k: usize, iterations: usize, seed: u64) -> Result<(Vec<usize>, Vec<Embedding>)> {
    if points.is_empty() {
        return Err(Error::usage("cannot cluster an empty batch"));
    }
    if k == 0 || k > points.len() {
        return Err(Error::usage(format!(
            "cluster count must be in 1..={}, got {k}",
            points.len()
        )));
    }
    let dim = points[0].dim();
    for p in points {
        p.check_dim(dim)?;
    }
    let data: Vec<&[f64]> = points.iter().map(Embedding::values).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers: Vec<Vec<f64>> = vec![data[rng.random_range(0..data.len())].to_vec()];
    let mut min_d: Vec<f64> = data.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let (idx, _) = min_d
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &d)| if d > best.1 { (i, d) } else { best });
        centers.push(data[idx].to_vec());
        for (m, p) in min_d.iter_mut().zip(&data) {
            *m = m.min(sq_dist(p, &centers[centers.len() - 1]));
        }
    }

    let mut assignment = vec![0; data.len()];
    for _ in 0..iterations {
        for (a, p) in assignment.iter_mut().zip(&data) {
            *a = nearest(p, &centers);
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (&a, p) in assignment.iter().zip(&data) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p.iter()) {
                *s += v;
            }
        }
        for ((c, s), n) in centers.iter_mut().zip(sums).zip(counts) {
            if n > 0 {
                *c = s.into_iter().map(|v| v / n as f64).collect();
            }
        }
    }
    for (a, p) in assignment.iter_mut().zip(&data) {
        *a = nearest(p, &centers);
    }
    let centers = centers.into_iter().map(Embedding::new).collect::<Result<Vec<_>>>()?;
    Ok((assignment, centers))
}

/// Clusters the batch and fuses once per cluster centroid.
pub fn batch_cluster_fuse(
    embeddings: &[Embedding],
    lib: &Library,
    config: &FusionConfig,
    cluster_count: usize,
    seed: u64,
) -> Result<BatchFusion> {
    let (assignment, centroids) = kmeans(embeddings, cluster_count, KMEANS_ITERATIONS, seed)?;
    let fused = centroids
        .iter()
        .map(|c| fuse(c, lib, config))
        .collect::<Result<Vec<_>>>()?;
    Ok(BatchFusion {
        assignment,
        centroids,
        fused,
    })
}
