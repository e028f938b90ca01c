//! Toy affine host model and a plain gradient-descent adapter trainer.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{AdapterSet, LoraPair, Matrix};

/// What the model emits per sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    /// Class distribution (softmax over the last layer).
    Softmax,
    /// Raw last-layer outputs.
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineLayer {
    pub name: String,
    /// `out × in`.
    pub weight: Matrix<f64>,
    pub bias: Vec<f64>,
}

/// Stack of affine layers with no activation in between.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    layers: Vec<AffineLayer>,
    head: Head,
}

pub(crate) fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub(crate) fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| std * normal(rng))
}

fn layer_name(i: usize) -> String {
    format!("layer{i}")
}

impl ToyModel {
    pub fn new(layers: Vec<AffineLayer>, head: Head) -> Result<Self> {
        if layers.is_empty() || layers.len() > 9 {
            return Err(Error::usage("a toy model has between 1 and 9 layers"));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.weight.rows() {
                return Err(Error::structural(format!("layer `{}`: bias length differs from output size", l.name)));
            }
            if i > 0 && layers[i - 1].weight.rows() != l.weight.cols() {
                return Err(Error::structural(format!("layer `{}` does not chain with its predecessor", l.name)));
            }
            if layers[..i].iter().any(|p| p.name == l.name) {
                return Err(Error::structural(format!("duplicate layer `{}`", l.name)));
            }
        }
        Ok(Self { layers, head })
    }

    /// Random host with `hidden` intermediate widths. Layer `i` has weight
    /// entries `N(0, (gain / sqrt(in))^2)`, where the last layer uses `logit_gain`.
    pub fn random(
        feature_dim: usize,
        hidden: &[usize],
        class_count: usize,
        logit_gain: f64,
        head: Head,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut widths = vec![feature_dim];
        widths.extend_from_slice(hidden);
        widths.push(class_count);
        if widths.contains(&0) {
            return Err(Error::usage("layer widths must be positive"));
        }
        let last = widths.len() - 2;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let gain = if i == last { logit_gain } else { 1.0 };
                let std = gain / (w[0] as f64).sqrt();
                AffineLayer {
                    name: layer_name(i),
                    weight: random_matrix(&mut rng, w[1], w[0], std),
                    bias: (0..w[1]).map(|_| 0.1 * normal(&mut rng)).collect(),
                }
            })
            .collect();
        Self::new(layers, head)
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn layers(&self) -> &[AffineLayer] {
        &self.layers
    }

    pub fn feature_dim(&self) -> usize {
        self.layers[0].weight.cols()
    }

    pub fn class_count(&self) -> usize {
        self.layers[self.layers.len() - 1].weight.rows()
    }

    pub fn last_layer(&self) -> &str {
        &self.layers[self.layers.len() - 1].name
    }

    /// Base weights keyed by layer name.
    pub fn base_weights(&self) -> BTreeMap<String, Matrix<f64>> {
        self.layers.iter().map(|l| (l.name.clone(), l.weight.clone())).collect()
    }

    /// SHA-256 over every weight and bias.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for l in &self.layers {
            h.update(l.name.as_bytes());
            for v in l.weight.data().iter().chain(&l.bias) {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Copy of the model with `delta` added to the named layer.
    pub fn with_delta(&self, layer: &str, delta: &Matrix<f64>) -> Result<Self> {
        let mut out = self.clone();
        let l = out
            .layers
            .iter_mut()
            .find(|l| l.name == layer)
            .ok_or_else(|| Error::structural(format!("unknown layer `{layer}`")))?;
        l.weight = l.weight.add(delta)?;
        Ok(out)
    }

    fn resolve<'a>(&'a self, weights: &'a BTreeMap<String, Matrix<f64>>) -> Result<Vec<&'a Matrix<f64>>> {
        self.layers
            .iter()
            .map(|l| {
                let w = weights
                    .get(&l.name)
                    .ok_or_else(|| Error::structural(format!("no weight for layer `{}`", l.name)))?;
                if w.shape() != l.weight.shape() {
                    return Err(Error::structural(format!("layer `{}`: weight shape mismatch", l.name)));
                }
                Ok(w)
            })
            .collect()
    }

    /// Pre-head outputs for `x` (`n × feature_dim`) using substituted weights.
    pub fn logits_with(&self, weights: &BTreeMap<String, Matrix<f64>>, x: &Matrix<f64>) -> Result<Matrix<f64>> {
        let ws = self.resolve(weights)?;
        let mut h = x.clone();
        for (l, w) in self.layers.iter().zip(ws) {
            h = affine(&h, w, &l.bias)?;
        }
        Ok(h)
    }

    pub fn logits(&self, x: &Matrix<f64>) -> Result<Matrix<f64>> {
        self.logits_with(&self.base_weights(), x)
    }

    /// Head outputs: class distributions for [`Head::Softmax`], logits otherwise.
    pub fn outputs_with(&self, weights: &BTreeMap<String, Matrix<f64>>, x: &Matrix<f64>) -> Result<Matrix<f64>> {
        let z = self.logits_with(weights, x)?;
        Ok(match self.head {
            Head::Softmax => softmax_rows(&z),
            Head::Identity => z,
        })
    }
}

/// `x W^T + b` for row-major samples.
fn affine(x: &Matrix<f64>, w: &Matrix<f64>, b: &[f64]) -> Result<Matrix<f64>> {
    let mut out = x.matmul(&w.transpose())?;
    for r in 0..out.rows() {
        for (c, bc) in b.iter().enumerate() {
            out.set(r, c, out.get(r, c) + bc);
        }
    }
    Ok(out)
}

pub fn softmax_rows(z: &Matrix<f64>) -> Matrix<f64> {
    let mut out = z.clone();
    for r in 0..z.rows() {
        let row = z.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = row.iter().map(|v| (v - max).exp()).sum();
        for (c, v) in row.iter().enumerate() {
            out.set(r, c, (v - max).exp() / total);
        }
    }
    out
}

/// Row-wise argmax, lowest index on ties.
pub fn argmax_rows(m: &Matrix<f64>) -> Vec<usize> {
    (0..m.rows())
        .map(|r| {
            m.row(r)
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Targets {
    /// Class labels, trained with cross-entropy on the logits.
    Labels(Vec<usize>),
    /// Regression targets, trained with mean squared error on the logits.
    Values(Matrix<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Samples {
    /// `n × feature_dim`.
    pub features: Matrix<f64>,
    pub targets: Targets,
}

impl Samples {
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check(&self, model: &ToyModel) -> Result<()> {
        if self.features.cols() != model.feature_dim() {
            return Err(Error::structural("sample features do not match the model input size"));
        }
        match &self.targets {
            Targets::Labels(y) => {
                if y.len() != self.len() {
                    return Err(Error::structural("label count differs from sample count"));
                }
                if let Some(bad) = y.iter().find(|&&c| c >= model.class_count()) {
                    return Err(Error::structural(format!("label {bad} is out of range")));
                }
            }
            Targets::Values(t) => {
                if t.shape() != (self.len(), model.class_count()) {
                    return Err(Error::structural("regression target shape mismatch"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerConfig {
    pub rank: usize,
    pub alpha: f64,
    pub steps: usize,
    pub lr: f64,
    /// Standard deviation of the initial `B` entries.
    pub init_b: f64,
    /// Seed of the initial factors. Sharing it across domains keeps adapters mergeable.
    pub init_seed: u64,
    /// Layers to adapt; empty means all.
    pub layers: Vec<String>,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            rank: 4,
            alpha: 8.0,
            steps: 500,
            lr: 0.25,
            init_b: 0.05,
            init_seed: 7,
            layers: Vec::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedAdapter {
    pub adapter: AdapterSet<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Frobenius norm of the scaled initial deltas over all adapted layers.
    pub initial_delta_norm: f64,
}

/// Frobenius norm of all scaled deltas of an adapter.
pub fn delta_norm(adapter: &AdapterSet<f64>) -> f64 {
    adapter
        .layers()
        .map(|p| {
            let n = p.delta(true).frobenius_norm();
            n * n
        })
        .sum::<f64>()
        .sqrt()
}

struct Factors {
    layer: usize,
    b: Matrix<f64>,
    a: Matrix<f64>,
    scale: f64,
}

fn loss_and_grad(z: &Matrix<f64>, targets: &Targets) -> (f64, Matrix<f64>) {
    let n = z.rows() as f64;
    match targets {
        Targets::Labels(y) => {
            let p = softmax_rows(z);
            let mut loss = 0.0;
            let mut g = p.clone();
            for (r, &c) in y.iter().enumerate() {
                let row = z.row(r);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                loss += lse - row[c];
                g.set(r, c, g.get(r, c) - 1.0);
            }
            (loss / n, g.scaled(1.0 / n))
        }
        Targets::Values(t) => {
            let diff = z.sub(t).expect("shapes checked");
            let loss = 0.5 * diff.data().iter().map(|v| v * v).sum::<f64>() / n;
            (loss, diff.scaled(1.0 / n))
        }
    }
}

/// Fits LoRA factors on the selected layers by full-batch gradient descent.
/// The model's own weights are never modified.
pub fn train_adapter(
    model: &ToyModel,
    samples: &Samples,
    config: &TrainerConfig,
    adapter_id: &str,
) -> Result<TrainedAdapter> {
    samples.check(model)?;
    if samples.is_empty() {
        return Err(Error::usage("cannot train on zero samples"));
    }
    if config.rank == 0 || !(config.alpha > 0.0) || !(config.lr > 0.0) {
        return Err(Error::usage("rank, alpha and lr must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
    let mut factors = Vec::new();
    for (i, l) in model.layers().iter().enumerate() {
        if !config.layers.is_empty() && !config.layers.contains(&l.name) {
            continue;
        }
        let (d, k) = l.weight.shape();
        if config.rank >= d.min(k) {
            return Err(Error::usage(format!(
                "rank {} is not below min(d, k) = {} for layer `{}`",
                config.rank,
                d.min(k),
                l.name
            )));
        }
        factors.push(Factors {
            layer: i,
            b: random_matrix(&mut rng, d, config.rank, config.init_b),
            a: random_matrix(&mut rng, config.rank, k, 1.0 / (k as f64).sqrt()),
            scale: config.alpha / config.rank as f64,
        });
    }
    if factors.is_empty() {
        return Err(Error::usage("no layer selected for adaptation"));
    }
    let initial_delta_norm = factors
        .iter()
        .map(|f| {
            let n = f.b.matmul(&f.a).expect("rank agrees").frobenius_norm() * f.scale;
            n * n
        })
        .sum::<f64>()
        .sqrt();

    type Pass = (Vec<Matrix<f64>>, Vec<Matrix<f64>>);
    let layers = model.layers();
    let forward = |factors: &[Factors]| -> Result<Pass> {
        let mut eff: Vec<Matrix<f64>> = layers.iter().map(|l| l.weight.clone()).collect();
        for f in factors {
            eff[f.layer].axpy(f.scale, &f.b.matmul(&f.a)?)?;
        }
        let mut acts = vec![samples.features.clone()];
        for (l, w) in layers.iter().zip(&eff) {
            let next = affine(acts.last().expect("non-empty"), w, &l.bias)?;
            acts.push(next);
        }
        Ok((eff, acts))
    };

    let mut initial_loss = f64::NAN;
    let mut last_loss = f64::NAN;
    for step in 0..=config.steps {
        let (eff, acts) = forward(&factors)?;
        let (loss, mut dz) = loss_and_grad(acts.last().expect("non-empty"), &samples.targets);
        if !loss.is_finite() || factors.iter().any(|f| !f.b.is_finite() || !f.a.is_finite()) {
            return Err(Error::Training {
                step,
                lr: config.lr,
                loss,
            });
        }
        if step == 0 {
            initial_loss = loss;
        }
        last_loss = loss;
        if step == config.steps {
            break;
        }
        let mut grads: BTreeMap<usize, Matrix<f64>> = BTreeMap::new();
        for li in (0..layers.len()).rev() {
            grads.insert(li, dz.transpose().matmul(&acts[li])?);
            if li > 0 {
                dz = dz.matmul(&eff[li])?;
            }
        }
        for f in &mut factors {
            let g = &grads[&f.layer];
            let gb = g.matmul(&f.a.transpose())?.scaled(f.scale);
            let ga = f.b.transpose().matmul(g)?.scaled(f.scale);
            f.b.axpy(-config.lr, &gb)?;
            f.a.axpy(-config.lr, &ga)?;
        }
    }

    let pairs = factors
        .into_iter()
        .map(|f| LoraPair::new(layers[f.layer].name.clone(), f.b, f.a, config.alpha))
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainedAdapter {
        adapter: AdapterSet::new(adapter_id, pairs)?,
        initial_loss,
        final_loss: last_loss,
        initial_delta_norm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::apply_fused;
    use crate::fusion::merge_concat;

    fn gaussian(rows: usize, cols: usize, seed: u64) -> Matrix<f64> {
        random_matrix(&mut ChaCha8Rng::seed_from_u64(seed), rows, cols, 1.0)
    }

    fn sampled_labels(model: &ToyModel, x: &Matrix<f64>, seed: u64) -> Vec<usize> {
        use rand::Rng;
        let p = softmax_rows(&model.logits(x).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..p.rows())
            .map(|r| {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                p.row(r).iter().position(|&q| {
                    acc += q;
                    u < acc
                })
                .unwrap_or(p.cols() - 1)
            })
            .collect()
    }

    #[test]
    fn nothing_to_learn_shrinks_the_delta() {
        let model = ToyModel::random(16, &[], 8, 2.0, Head::Softmax, 1).unwrap();
        let x = gaussian(2000, 16, 2);
        let y = sampled_labels(&model, &x, 3);
        let cfg = TrainerConfig {
            init_b: 3.0,
            steps: 1000,
            lr: 1.0,
            ..TrainerConfig::default()
        };
        let before = model.digest();
        let t = train_adapter(&model, &Samples { features: x, targets: Targets::Labels(y) }, &cfg, "zero").unwrap();
        assert_eq!(model.digest(), before);
        let trained = delta_norm(&t.adapter);
        assert!(trained < 0.1 * t.initial_delta_norm, "{trained} vs {}", t.initial_delta_norm);
        assert!(t.final_loss < t.initial_loss);
    }

    /// Normal equations solved by Gauss-Jordan elimination with partial pivoting.
    fn least_squares_delta(x: &Matrix<f64>, residual: &Matrix<f64>) -> Matrix<f64> {
        // Δ^T = (X^T X)^{-1} X^T R
        let xtx = x.transpose().matmul(x).unwrap();
        let xtr = x.transpose().matmul(residual).unwrap();
        let n = xtx.rows();
        let m = xtr.cols();
        let mut aug: Vec<Vec<f64>> = (0..n)
            .map(|i| xtx.row(i).iter().chain(xtr.row(i)).copied().collect())
            .collect();
        for col in 0..n {
            let piv = (col..n)
                .max_by(|&a, &b| aug[a][col].abs().total_cmp(&aug[b][col].abs()))
                .unwrap();
            aug.swap(col, piv);
            let p = aug[col][col];
            for v in aug[col].iter_mut() {
                *v /= p;
            }
            let pivot = aug[col].clone();
            for (r, row) in aug.iter_mut().enumerate() {
                if r != col {
                    let f = row[col];
                    for (x, p) in row.iter_mut().zip(&pivot) {
                        *x -= f * p;
                    }
                }
            }
        }
        Matrix::from_fn(m, n, |i, j| aug[j][n + i])
    }

    #[test]
    fn regression_variant_recovers_least_squares_solution() {
        let model = ToyModel::random(12, &[], 6, 1.0, Head::Identity, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let u = random_matrix(&mut rng, 6, 2, 1.0);
        let v = random_matrix(&mut rng, 2, 12, 0.5);
        let truth = u.matmul(&v).unwrap();
        let x = gaussian(400, 12, 6);
        let noise = gaussian(400, 6, 7).scaled(0.01);
        let teacher = model.with_delta("layer0", &truth).unwrap();
        let y = teacher.logits(&x).unwrap().add(&noise).unwrap();

        let base = model.logits(&x).unwrap();
        let oracle = least_squares_delta(&x, &y.sub(&base).unwrap());

        let cfg = TrainerConfig {
            rank: 3,
            alpha: 3.0,
            steps: 3000,
            lr: 0.1,
            init_b: 0.01,
            ..TrainerConfig::default()
        };
        let t = train_adapter(&model, &Samples { features: x, targets: Targets::Values(y) }, &cfg, "ls").unwrap();
        let learned = t.adapter.layer("layer0").unwrap().delta(true);
        let rel = learned.sub(&oracle).unwrap().frobenius_norm() / oracle.frobenius_norm();
        assert!(rel < 1e-2, "relative gap {rel}");
    }

    #[test]
    fn divergence_reports_step_and_lr() {
        let model = ToyModel::random(8, &[], 4, 1.0, Head::Identity, 1).unwrap();
        let x = gaussian(50, 8, 2).scaled(100.0);
        let y = gaussian(50, 4, 3);
        let cfg = TrainerConfig {
            rank: 2,
            lr: 1e6,
            steps: 200,
            ..TrainerConfig::default()
        };
        match train_adapter(&model, &Samples { features: x, targets: Targets::Values(y) }, &cfg, "boom") {
            Err(Error::Training { lr, step, .. }) => {
                assert_eq!(lr, 1e6);
                assert!(step > 0);
            }
            other => panic!("expected a training error, got {other:?}"),
        }
    }

    #[test]
    fn two_layer_training_lowers_loss_and_keeps_base() {
        let model = ToyModel::random(16, &[16], 8, 2.0, Head::Softmax, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let teacher = model
            .with_delta("layer1", &random_matrix(&mut rng, 8, 16, 0.8))
            .unwrap();
        let x = gaussian(600, 16, 11);
        let y = sampled_labels(&teacher, &x, 12);
        let before = model.digest();
        let t = train_adapter(&model, &Samples { features: x.clone(), targets: Targets::Labels(y) }, &TrainerConfig::default(), "d").unwrap();
        assert_eq!(model.digest(), before);
        assert!(t.final_loss < t.initial_loss);
        assert_eq!(t.adapter.layer_count(), 2);

        let fused = merge_concat::<f64, f64>(&[&t.adapter], &[1.0]).unwrap();
        let adapted = apply_fused(&model.base_weights(), &fused).unwrap();
        let p = model.outputs_with(&adapted, &x).unwrap();
        for r in 0..p.rows() {
            assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
