//! Synthetic domains: an embedding cloud plus labelled pixels drawn from a
//! teacher that adds the domain's target map to the host's last layer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{argmax_rows, normal, random_matrix, softmax_rows, Samples, Targets, ToyModel};
use crate::error::{Error, Result};
use crate::library::Embedding;
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDomainSpec {
    pub domain_id: String,
    pub embedding_center: Embedding,
    /// Per-coordinate standard deviation of the embedding cloud.
    pub embedding_spread: f64,
    /// Ground-truth delta on the host's last layer.
    pub target_map: Matrix<f64>,
    /// Training images; each contributes one embedding and `pixels_per_image` samples.
    pub n_train: usize,
    pub n_test: usize,
    pub pixels_per_image: usize,
    pub seed: u64,
    /// Labels are drawn from `softmax(teacher_logits / label_temperature)`; 0 takes the argmax.
    #[serde(default = "default_label_temperature")]
    pub label_temperature: f64,
}

fn default_label_temperature() -> f64 {
    1.0
}

impl SyntheticDomainSpec {
    pub fn validate(&self, host: &ToyModel) -> Result<()> {
        if !(self.embedding_spread > 0.0) || !self.embedding_spread.is_finite() {
            return Err(Error::usage(format!(
                "domain `{}`: spread must be positive, got {}",
                self.domain_id, self.embedding_spread
            )));
        }
        if !(self.label_temperature >= 0.0) || !self.label_temperature.is_finite() {
            return Err(Error::usage(format!(
                "domain `{}`: label temperature must be finite and nonnegative",
                self.domain_id
            )));
        }
        if self.n_train == 0 || self.n_test == 0 || self.pixels_per_image == 0 {
            return Err(Error::usage(format!("domain `{}`: sample counts must be positive", self.domain_id)));
        }
        let last = &host.layers()[host.layers().len() - 1];
        if self.target_map.shape() != last.weight.shape() {
            return Err(Error::structural(format!(
                "domain `{}`: target map is {:?}, last layer is {:?}",
                self.domain_id,
                self.target_map.shape(),
                last.weight.shape()
            )));
        }
        Ok(())
    }
}

/// One test image: an embedding for retrieval and its labelled pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct TestImage {
    pub embedding: Embedding,
    pub pixels: Matrix<f64>,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedDomain {
    pub train_embeddings: Vec<Embedding>,
    pub train: Samples,
    pub test: Vec<TestImage>,
}

fn sample_embedding(rng: &mut ChaCha8Rng, spec: &SyntheticDomainSpec) -> Result<Embedding> {
    Embedding::new(
        spec.embedding_center
            .values()
            .iter()
            .map(|c| c + spec.embedding_spread * normal(rng))
            .collect(),
    )
}

fn sample_labels(rng: &mut ChaCha8Rng, logits: &Matrix<f64>, temperature: f64) -> Vec<usize> {
    if temperature == 0.0 {
        return argmax_rows(logits);
    }
    let probs = softmax_rows(&logits.scaled(1.0 / temperature));
    (0..probs.rows())
        .map(|r| {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            probs
                .row(r)
                .iter()
                .position(|&p| {
                    acc += p;
                    u < acc
                })
                .unwrap_or(probs.cols() - 1)
        })
        .collect()
}

/// Draws the domain's data. Labels come from a teacher whose last layer is
/// the host's plus `target_map`, so the Bayes classifier is that teacher.
pub fn generate_domain(spec: &SyntheticDomainSpec, host: &ToyModel) -> Result<GeneratedDomain> {
    spec.validate(host)?;
    let teacher = host.with_delta(host.last_layer(), &spec.target_map)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let f = host.feature_dim();
    let p = spec.pixels_per_image;

    let train_embeddings = (0..spec.n_train)
        .map(|_| sample_embedding(&mut rng, spec))
        .collect::<Result<Vec<_>>>()?;
    let features = random_matrix(&mut rng, spec.n_train * p, f, 1.0);
    let labels = sample_labels(&mut rng, &teacher.logits(&features)?, spec.label_temperature);

    let mut test = Vec::with_capacity(spec.n_test);
    for _ in 0..spec.n_test {
        let embedding = sample_embedding(&mut rng, spec)?;
        let pixels = random_matrix(&mut rng, p, f, 1.0);
        let labels = sample_labels(&mut rng, &teacher.logits(&pixels)?, spec.label_temperature);
        test.push(TestImage {
            embedding,
            pixels,
            labels,
        });
    }
    Ok(GeneratedDomain {
        train_embeddings,
        train: Samples {
            features,
            targets: Targets::Labels(labels),
        },
        test,
    })
}
