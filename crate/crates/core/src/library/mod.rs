//! The adapter library: domain centroids paired with the adapters trained on
//! those domains.
//!
//! A [`Library`] is an immutable value. [`Library::extend`] and
//! [`Library::exclude`] return new libraries that share record storage with
//! the original through `Arc`, so a leave-one-out view costs one vector of
//! pointers.

mod ingest;
mod store;

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{AdapterSet, LayerShape, Matrix};

pub use ingest::{parse_embeddings, read_embeddings, write_embeddings};
pub use store::{adapter_payload, decode_adapter, load, save, BlobEntry, LayerEntry, Manifest, RecordEntry, MANIFEST_FILE};

/// Current on-disk format version.
pub const FORMAT_VERSION: u32 = 1;

/// Below this many samples a domain gets no covariance (and is skipped by the
/// Mahalanobis metric).
pub const DEFAULT_MIN_COVARIANCE_SAMPLES: usize = 500;

/// Adapter payloads as they live in a library.
pub type StoredAdapter = AdapterSet<f32>;

/// A point in the domain-navigator embedding space.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Embedding(Vec<f64>);

impl TryFrom<Vec<f64>> for Embedding {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<Embedding> for Vec<f64> {
    fn from(e: Embedding) -> Self {
        e.0
    }
}

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::usage("embedding must have at least one coordinate"));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "embedding coordinate {i} is not finite ({})",
                values[i]
            )));
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    /// Unit-length copy. Zero vectors are a usage error.
    pub fn normalized(&self) -> Result<Self> {
        let n = self.norm();
        if n == 0.0 {
            return Err(Error::usage("cannot normalize a zero-norm embedding"));
        }
        Ok(Self(self.0.iter().map(|v| v / n).collect()))
    }

    pub fn euclidean(&self, other: &Self) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// Short hex digest of the coordinate bit patterns.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for v in &self.0 {
            h.update(v.to_le_bytes());
        }
        hex::encode(&h.finalize()[..8])
    }

    pub(crate) fn check_dim(&self, dim: usize) -> Result<()> {
        if self.dim() != dim {
            return Err(Error::structural(format!(
                "embedding has dimension {}, expected {dim}",
                self.dim()
            )));
        }
        Ok(())
    }
}

/// Arithmetic mean of a non-empty set of embeddings.
pub fn compute_centroid(embeddings: &[Embedding]) -> Result<Embedding> {
    let first = embeddings
        .first()
        .ok_or_else(|| Error::usage("cannot take the centroid of zero embeddings"))?;
    let dim = first.dim();
    let mut sum = vec![0.0; dim];
    for e in embeddings {
        e.check_dim(dim)?;
        for (s, v) in sum.iter_mut().zip(e.values()) {
            *s += v;
        }
    }
    let n = embeddings.len() as f64;
    Embedding::new(sum.into_iter().map(|s| s / n).collect())
}

/// Sample covariance (divisor `N - 1`) plus `ridge · I`.
pub fn compute_covariance(embeddings: &[Embedding], ridge: f64) -> Result<Matrix<f64>> {
    if embeddings.len() < 2 {
        return Err(Error::usage(format!(
            "covariance needs at least 2 embeddings, got {}",
            embeddings.len()
        )));
    }
    if !(ridge >= 0.0 && ridge.is_finite()) {
        return Err(Error::usage(format!("ridge must be nonnegative, got {ridge}")));
    }
    let mean = compute_centroid(embeddings)?;
    let dim = mean.dim();
    let mut cov = Matrix::<f64>::zeros(dim, dim);
    let mut centered = vec![0.0; dim];
    for e in embeddings {
        for ((c, v), m) in centered.iter_mut().zip(e.values()).zip(mean.values()) {
            *c = v - m;
        }
        for i in 0..dim {
            for j in 0..=i {
                let v = cov.get(i, j) + centered[i] * centered[j];
                cov.set(i, j, v);
            }
        }
    }
    let denom = (embeddings.len() - 1) as f64;
    for i in 0..dim {
        for j in 0..=i {
            let mut v = cov.get(i, j) / denom;
            if i == j {
                v += ridge;
            }
            cov.set(i, j, v);
            cov.set(j, i, v);
        }
    }
    Ok(cov)
}

/// A regularised covariance together with its Cholesky factor.
#[derive(Debug, Clone, PartialEq)]
pub struct Covariance {
    matrix: Matrix<f64>,
    cholesky: Matrix<f64>,
}

impl Covariance {
    pub fn new(matrix: Matrix<f64>) -> Result<Self> {
        if !matrix.is_symmetric(1e-9) {
            return Err(Error::structural("covariance is not symmetric"));
        }
        let cholesky = matrix.cholesky()?;
        Ok(Self { matrix, cholesky })
    }

    pub fn matrix(&self) -> &Matrix<f64> {
        &self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.rows()
    }

    /// `sqrt(vᵀ Σ⁻¹ v)`.
    pub fn mahalanobis_norm(&self, v: &[f64]) -> Result<f64> {
        let y = crate::tensor::forward_substitute(&self.cholesky, v)?;
        Ok(y.iter().map(|x| x * x).sum::<f64>().sqrt())
    }
}

/// Options controlling how embeddings become a [`DomainRecord`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecordOptions {
    pub ridge: f64,
    pub min_covariance_samples: usize,
    /// L2-normalise every embedding before averaging.
    pub normalize: bool,
}

impl Default for RecordOptions {
    fn default() -> Self {
        Self {
            ridge: 1e-3,
            min_covariance_samples: DEFAULT_MIN_COVARIANCE_SAMPLES,
            normalize: false,
        }
    }
}

/// One library entry: `(centroid, adapter)` plus bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainRecord {
    domain_id: String,
    centroid: Embedding,
    sample_count: usize,
    adapter: Arc<StoredAdapter>,
    covariance: Option<Covariance>,
    pub metadata: BTreeMap<String, String>,
}

impl DomainRecord {
    pub fn new(
        domain_id: impl Into<String>,
        centroid: Embedding,
        sample_count: usize,
        adapter: StoredAdapter,
        covariance: Option<Covariance>,
    ) -> Result<Self> {
        let domain_id = domain_id.into();
        if domain_id.is_empty() {
            return Err(Error::usage("domain id must not be empty"));
        }
        if sample_count == 0 {
            return Err(Error::usage(format!(
                "domain `{domain_id}` must have at least one sample"
            )));
        }
        if let Some(cov) = &covariance {
            if cov.dim() != centroid.dim() {
                return Err(Error::structural(format!(
                    "domain `{domain_id}`: covariance is {}x{} but the centroid has dimension {}",
                    cov.dim(),
                    cov.dim(),
                    centroid.dim()
                )));
            }
        }
        Ok(Self {
            domain_id,
            centroid,
            sample_count,
            adapter: Arc::new(adapter),
            covariance,
            metadata: BTreeMap::new(),
        })
    }

    pub fn domain_id(&self) -> &str {
        &self.domain_id
    }

    pub fn centroid(&self) -> &Embedding {
        &self.centroid
    }

    pub fn sample_count(&self) -> usize {
        self.sample_count
    }

    pub fn adapter(&self) -> &StoredAdapter {
        &self.adapter
    }

    pub fn covariance(&self) -> Option<&Covariance> {
        self.covariance.as_ref()
    }

    pub fn mahalanobis_eligible(&self) -> bool {
        self.covariance.is_some()
    }
}

/// Computes the centroid (and, with enough samples, the covariance) of a
/// domain's embeddings and pairs it with the domain's adapter.
pub fn build_record(
    domain_id: impl Into<String>,
    embeddings: &[Embedding],
    adapter: StoredAdapter,
    options: &RecordOptions,
) -> Result<DomainRecord> {
    let normalized;
    let embeddings = if options.normalize {
        normalized = embeddings
            .iter()
            .map(Embedding::normalized)
            .collect::<Result<Vec<_>>>()?;
        &normalized[..]
    } else {
        embeddings
    };
    let centroid = compute_centroid(embeddings)?;
    let covariance = if embeddings.len() >= options.min_covariance_samples.max(2) {
        Covariance::new(compute_covariance(embeddings, options.ridge)?).ok()
    } else {
        None
    };
    DomainRecord::new(domain_id, centroid, embeddings.len(), adapter, covariance)
}

/// Counts record reads per domain id. Attach one to a library view to check
/// which records an evaluation touched.
#[derive(Debug, Default)]
pub struct AccessLog {
    counts: Mutex<BTreeMap<String, usize>>,
}

impl AccessLog {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    fn touch(&self, id: &str) {
        let mut counts = self.counts.lock().expect("access log poisoned");
        *counts.entry(id.to_owned()).or_default() += 1;
    }

    pub fn count(&self, id: &str) -> usize {
        self.counts
            .lock()
            .expect("access log poisoned")
            .get(id)
            .copied()
            .unwrap_or(0)
    }

    pub fn snapshot(&self) -> BTreeMap<String, usize> {
        self.counts.lock().expect("access log poisoned").clone()
    }
}

/// Ordered collection of domain records sharing one embedding space and one
/// adapter layout.
#[derive(Debug, Clone)]
pub struct Library {
    records: Vec<Arc<DomainRecord>>,
    embedding_dim: usize,
    format_version: u32,
    access_log: Option<Arc<AccessLog>>,
}

impl PartialEq for Library {
    fn eq(&self, other: &Self) -> bool {
        self.embedding_dim == other.embedding_dim
            && self.format_version == other.format_version
            && self.records.len() == other.records.len()
            && self.records.iter().zip(&other.records).all(|(a, b)| a == b)
    }
}

impl Library {
    pub fn new(embedding_dim: usize) -> Self {
        Self {
            records: Vec::new(),
            embedding_dim,
            format_version: FORMAT_VERSION,
            access_log: None,
        }
    }

    /// Builds a library by extending an empty one record by record.
    pub fn from_records(embedding_dim: usize, records: impl IntoIterator<Item = DomainRecord>) -> Result<Self> {
        records
            .into_iter()
            .try_fold(Self::new(embedding_dim), |lib, r| lib.extend(r))
    }

    pub fn embedding_dim(&self) -> usize {
        self.embedding_dim
    }

    pub fn format_version(&self) -> u32 {
        self.format_version
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn with_access_log(mut self, log: Arc<AccessLog>) -> Self {
        self.access_log = Some(log);
        self
    }

    /// Iterates over records; each yielded record is counted in the access log.
    pub fn records(&self) -> impl Iterator<Item = &DomainRecord> + '_ {
        self.records.iter().map(move |r| {
            if let Some(log) = &self.access_log {
                log.touch(r.domain_id());
            }
            r.as_ref()
        })
    }

    pub fn get(&self, domain_id: &str) -> Option<&DomainRecord> {
        let r = self.records.iter().find(|r| r.domain_id() == domain_id)?;
        if let Some(log) = &self.access_log {
            log.touch(domain_id);
        }
        Some(r)
    }

    pub fn domain_ids(&self) -> Vec<String> {
        self.records.iter().map(|r| r.domain_id().to_owned()).collect()
    }

    pub fn contains(&self, domain_id: &str) -> bool {
        self.records.iter().any(|r| r.domain_id() == domain_id)
    }

    /// Layer layout every adapter in this library follows.
    pub fn layout(&self) -> Option<Vec<LayerShape>> {
        self.records.first().map(|r| r.adapter().shapes())
    }

    /// Returns a new library with `record` appended. Existing records are shared, never modified.
    pub fn extend(&self, record: DomainRecord) -> Result<Library> {
        let id = record.domain_id();
        if self.contains(id) {
            return Err(Error::usage(format!("domain `{id}` is already in the library")));
        }
        record.centroid().check_dim(self.embedding_dim).map_err(|_| {
            Error::structural(format!(
                "domain `{id}`: centroid has dimension {}, library uses {}",
                record.centroid().dim(),
                self.embedding_dim
            ))
        })?;
        let adapter = record.adapter();
        if !adapter.is_finite() {
            return Err(Error::Numeric(format!("domain `{id}`: adapter has non-finite entries")));
        }
        if let Some(p) = adapter.layers().find(|p| !p.is_low_rank()) {
            return Err(Error::structural(format!(
                "domain `{id}`: layer `{}` has rank {} which is not below min(d, k) = {}",
                p.layer_name(),
                p.rank(),
                p.out_dim().min(p.in_dim())
            )));
        }
        if let Some(first) = self.records.first() {
            first
                .adapter()
                .check_compatible(adapter)
                .map_err(|e| Error::structural(format!("domain `{id}`: {e}")))?;
        }
        let mut records = self.records.clone();
        records.push(Arc::new(record));
        Ok(Library {
            records,
            embedding_dim: self.embedding_dim,
            format_version: self.format_version,
            access_log: self.access_log.clone(),
        })
    }

    /// A view without `domain_id`. Record storage stays shared.
    pub fn exclude(&self, domain_id: &str) -> Result<Library> {
        if !self.contains(domain_id) {
            return Err(Error::usage(format!("domain `{domain_id}` is not in the library")));
        }
        Ok(Library {
            records: self
                .records
                .iter()
                .filter(|r| r.domain_id() != domain_id)
                .cloned()
                .collect(),
            embedding_dim: self.embedding_dim,
            format_version: self.format_version,
            access_log: self.access_log.clone(),
        })
    }

    /// A view without the access log (used when handing a library to code that should not be counted).
    pub fn without_access_log(&self) -> Library {
        Library {
            access_log: None,
            ..self.clone()
        }
    }

    /// Hex SHA-256 over ids, centroids, counts and adapter payload bits.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.format_version.to_le_bytes());
        h.update((self.embedding_dim as u64).to_le_bytes());
        for r in &self.records {
            h.update(record_digest_bytes(r));
        }
        hex::encode(h.finalize())
    }
}

fn record_digest_bytes(r: &DomainRecord) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(r.domain_id().as_bytes());
    out.push(0);
    out.extend_from_slice(&(r.sample_count() as u64).to_le_bytes());
    for v in r.centroid().values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&store::adapter_payload(r.adapter()));
    if let Some(cov) = r.covariance() {
        for v in cov.matrix().data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Per-record digest, handy for checking that records were not mutated.
pub fn record_digest(r: &DomainRecord) -> String {
    hex::encode(Sha256::digest(record_digest_bytes(r)))
}


#[cfg(test)]
mod tests {
    use super::test_support::*;
    use super::*;
    use proptest::prelude::*;

    fn e(v: &[f64]) -> Embedding {
        Embedding::new(v.to_vec()).unwrap()
    }

    #[test]
    fn centroid_examples() {
        assert_eq!(compute_centroid(&[e(&[1.0, 0.0]), e(&[0.0, 1.0])]).unwrap(), e(&[0.5, 0.5]));
        assert_eq!(compute_centroid(&[e(&[0.3, -2.0])]).unwrap(), e(&[0.3, -2.0]));
        assert_eq!(
            compute_centroid(&[e(&[1.0, 1.0]), e(&[3.0, 1.0]), e(&[2.0, 4.0])]).unwrap(),
            e(&[2.0, 2.0])
        );
        assert!(matches!(compute_centroid(&[]), Err(Error::Usage(_))));
        assert!(matches!(
            compute_centroid(&[e(&[1.0]), e(&[1.0, 2.0])]),
            Err(Error::Structural(_))
        ));
    }

    #[test]
    fn covariance_examples() {
        let same = vec![e(&[1.0, 2.0, 3.0]); 4];
        let c = compute_covariance(&same, 0.1).unwrap();
        assert!(c.max_abs_diff(&Matrix::identity(3).scaled(0.1)).unwrap() < 1e-15);

        let c = compute_covariance(&[e(&[0.0, 0.0]), e(&[2.0, 0.0])], 0.0).unwrap();
        assert_eq!(c, Matrix::from_rows(&[[2.0, 0.0], [0.0, 0.0]]).unwrap());

        assert!(matches!(compute_covariance(&[e(&[1.0])], 0.0), Err(Error::Usage(_))));
    }

    #[test]
    fn ridge_lower_bounds_the_spectrum() {
        // Gershgorin-free check: vᵀ Σ v ≥ ridge for unit vectors, probed on random directions.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<_> = (0..20)
            .map(|_| e(&[rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.0]))
            .collect();
        let c = compute_covariance(&pts, 1.0).unwrap();
        // Cholesky of Σ - 0.999 I succeeds iff all eigenvalues exceed 0.999.
        let shifted = c.sub(&Matrix::identity(3).scaled(0.999)).unwrap();
        assert!(shifted.cholesky().is_ok());
    }

    #[test]
    fn build_record_eligibility() {
        let adapter = random_adapter("a", &[("proj", 6, 5)], 2, 1);
        let r = build_record("a", &[e(&[1.0, 2.0])], adapter.clone(), &RecordOptions::default()).unwrap();
        assert_eq!(r.centroid(), &e(&[1.0, 2.0]));
        assert_eq!(r.sample_count(), 1);
        assert!(r.covariance().is_none());

        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let many: Vec<_> = (0..600)
            .map(|_| e(&[rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]))
            .collect();
        let r = build_record("a", &many, adapter.clone(), &RecordOptions::default()).unwrap();
        assert_eq!(r.sample_count(), 600);
        assert!(r.mahalanobis_eligible());

        let r = build_record("a", &many[..499], adapter, &RecordOptions::default()).unwrap();
        assert!(!r.mahalanobis_eligible());
    }

    #[test]
    fn normalize_option_applies_before_averaging() {
        let adapter = random_adapter("a", &[("proj", 6, 5)], 2, 1);
        let opts = RecordOptions {
            normalize: true,
            ..Default::default()
        };
        let r = build_record("a", &[e(&[3.0, 0.0]), e(&[0.0, 5.0])], adapter, &opts).unwrap();
        assert_eq!(r.centroid(), &e(&[0.5, 0.5]));
    }

    #[test]
    fn extend_and_exclude() {
        let lib = Library::new(2);
        let lib1 = lib.extend(record("a", &[0.0, 0.0], 2, 1)).unwrap();
        assert_eq!(lib1.len(), 1);
        assert!(lib.is_empty());

        let lib3 = lib1
            .extend(record("b", &[1.0, 0.0], 2, 2))
            .unwrap()
            .extend(record("c", &[0.0, 1.0], 2, 3))
            .unwrap();
        assert!(matches!(lib3.extend(record("a", &[5.0, 5.0], 2, 4)), Err(Error::Usage(_))));
        assert!(matches!(lib3.extend(record("d", &[5.0, 5.0], 3, 4)), Err(Error::Structural(_))));
        assert!(matches!(lib3.extend(record("d", &[5.0, 5.0, 1.0], 2, 4)), Err(Error::Structural(_))));

        let ab = lib3.exclude("a").unwrap().exclude("b").unwrap();
        let ba = lib3.exclude("b").unwrap().exclude("a").unwrap();
        assert_eq!(ab, ba);
        assert_eq!(ab.domain_ids(), vec!["c"]);
        assert_eq!(lib3.len(), 3);
        assert!(lib1.exclude("a").unwrap().is_empty());
        assert!(matches!(lib3.exclude("zz"), Err(Error::Usage(_))));
    }

    #[test]
    fn leave_one_out_views_are_distinct() {
        let ids = ["a", "b", "c", "d", "e"];
        let lib = Library::from_records(
            2,
            ids.iter().enumerate().map(|(i, id)| record(id, &[i as f64, 0.0], 2, i as u64)),
        )
        .unwrap();
        let views: Vec<_> = ids.iter().map(|id| lib.exclude(id).unwrap().domain_ids()).collect();
        for (i, v) in views.iter().enumerate() {
            assert_eq!(v.len(), ids.len() - 1);
            assert!(!v.contains(&ids[i].to_string()));
            for w in &views[i + 1..] {
                assert_ne!(v, w);
            }
        }
    }

    #[test]
    fn extend_never_mutates_prior_records() {
        let lib = Library::from_records(2, [record("a", &[0.0, 0.0], 2, 1), record("b", &[1.0, 1.0], 2, 2)]).unwrap();
        let before: Vec<_> = lib.records().map(record_digest).collect();
        let bigger = lib.extend(record("c", &[2.0, 2.0], 2, 3)).unwrap();
        let after: Vec<_> = lib.records().map(record_digest).collect();
        assert_eq!(before, after);
        let shared: Vec<_> = bigger.records().take(2).map(record_digest).collect();
        assert_eq!(before, shared);
    }

    #[test]
    fn access_log_counts_reads() {
        let log = AccessLog::new();
        let lib = Library::from_records(2, [record("a", &[0.0, 0.0], 2, 1), record("b", &[1.0, 1.0], 2, 2)])
            .unwrap()
            .with_access_log(log.clone());
        let view = lib.exclude("a").unwrap();
        let _ = view.records().count();
        assert_eq!(log.count("a"), 0);
        assert_eq!(log.count("b"), 1);
    }

    proptest! {
        #[test]
        fn centroid_permutation_invariant_and_translation_equivariant(
            pts in proptest::collection::vec(proptest::collection::vec(-10.0f64..10.0, 3), 1..12),
            shift in proptest::collection::vec(-5.0f64..5.0, 3),
            rot in 0usize..12,
        ) {
            let es: Vec<_> = pts.iter().map(|p| e(p)).collect();
            let c = compute_centroid(&es).unwrap();
            let mut perm = es.clone();
            perm.rotate_left(rot % es.len());
            perm.reverse();
            let cp = compute_centroid(&perm).unwrap();
            for (a, b) in c.values().iter().zip(cp.values()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            let moved: Vec<_> = es
                .iter()
                .map(|x| e(&x.values().iter().zip(&shift).map(|(a, s)| a + s).collect::<Vec<_>>()))
                .collect();
            let cm = compute_centroid(&moved).unwrap();
            for ((a, b), s) in cm.values().iter().zip(c.values()).zip(&shift) {
                prop_assert!((a - (b + s)).abs() < 1e-9);
            }
        }
    }
}
