//! Dense matrices and low-rank adapter factors.
//!
//! Everything here is a plain value: no interior mutability, no framework
//! handles. Products use a fixed reduction order so that results are
//! bit-reproducible on a given platform.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major matrix.
#[derive(Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Matrix<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix[{}x{}]", self.rows, self.cols)?;
        if self.data.len() <= 16 {
            f.debug_list().entries(self.data.iter()).finish()?;
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct RawMatrix<V> {
    rows: usize,
    cols: usize,
    data: V,
}

impl<T: Scalar + Serialize> Serialize for Matrix<T> {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        RawMatrix {
            rows: self.rows,
            cols: self.cols,
            data: &self.data,
        }
        .serialize(s)
    }
}

impl<'de, T: Scalar + Deserialize<'de>> Deserialize<'de> for Matrix<T> {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = RawMatrix::<Vec<T>>::deserialize(d)?;
        Matrix::new(raw.rows, raw.cols, raw.data).map_err(serde::de::Error::custom)
    }
}

impl<T: Scalar> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::structural(format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::structural(format!(
                "matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows; all rows must have equal length.
    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::structural(format!(
                    "row {i} has {} entries, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v.cast()).collect(),
        }
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn scaled(&self, s: T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| v * s).collect(),
        }
    }

    /// Matrix product. Each output entry is accumulated over the inner index
    /// in ascending order.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::structural(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let (n, m) = (self.rows, other.cols);
        let mut out = vec![T::zero(); n * m];
        for i in 0..n {
            let acc = &mut out[i * m..(i + 1) * m];
            for p in 0..self.cols {
                let x = self.data[i * self.cols + p];
                let yrow = &other.data[p * m..(p + 1) * m];
                for (a, &y) in acc.iter_mut().zip(yrow) {
                    *a += x * y;
                }
            }
        }
        Ok(Self {
            rows: n,
            cols: m,
            data: out,
        })
    }

    /// `y = self * x` for a column vector `x`.
    pub fn matvec(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.cols {
            return Err(Error::structural(format!(
                "cannot multiply {}x{} by a vector of length {}",
                self.rows,
                self.cols,
                x.len()
            )));
        }
        Ok((0..self.rows)
            .map(|i| {
                let mut acc = T::zero();
                for (&a, &b) in self.row(i).iter().zip(x) {
                    acc += a * b;
                }
                acc
            })
            .collect())
    }

    /// In-place `self += scale * x`.
    pub fn axpy(&mut self, scale: T, x: &Self) -> Result<()> {
        self.check_same_shape(x)?;
        for (a, &b) in self.data.iter_mut().zip(&x.data) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        axpy_accumulate(self.clone(), T::one(), other)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        axpy_accumulate(self.clone(), -T::one(), other)
    }

    pub fn frobenius_norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        self.check_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max))
    }

    /// Horizontal concatenation `[M0, M1, ...]`; all parts share a row count.
    pub fn hstack(parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::usage("cannot concatenate zero matrices"))?;
        let rows = first.rows;
        if let Some(bad) = parts.iter().find(|p| p.rows != rows) {
            return Err(Error::structural(format!(
                "hstack row mismatch: {} vs {}",
                rows, bad.rows
            )));
        }
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(i));
            }
        }
        Self::new(rows, cols, data)
    }

    /// Vertical stacking; all parts share a column count.
    pub fn vstack(parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::usage("cannot stack zero matrices"))?;
        let cols = first.cols;
        if let Some(bad) = parts.iter().find(|p| p.cols != cols) {
            return Err(Error::structural(format!(
                "vstack column mismatch: {} vs {}",
                cols, bad.cols
            )));
        }
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.data.len()).sum());
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Self::new(data.len() / cols, cols, data)
    }

    pub fn is_symmetric(&self, tol: T) -> bool {
        self.rows == self.cols
            && (0..self.rows)
                .all(|i| (0..i).all(|j| (self.get(i, j) - self.get(j, i)).abs() <= tol))
    }

    /// Lower-triangular Cholesky factor `L` with `self = L Lᵀ`.
    ///
    /// Fails when the matrix is not square or not numerically positive definite.
    pub fn cholesky(&self) -> Result<Self> {
        if self.rows != self.cols {
            return Err(Error::structural(format!(
                "cholesky needs a square matrix, got {}x{}",
                self.rows, self.cols
            )));
        }
        let n = self.rows;
        let mut l = Self::zeros(n, n);
        for j in 0..n {
            let mut diag = self.get(j, j);
            for p in 0..j {
                diag -= l.get(j, p) * l.get(j, p);
            }
            if !(diag > T::zero()) {
                return Err(Error::Numeric(format!(
                    "matrix is not positive definite (pivot {j} = {diag})"
                )));
            }
            let djj = diag.sqrt();
            l.set(j, j, djj);
            for i in j + 1..n {
                let mut v = self.get(i, j);
                for p in 0..j {
                    v -= l.get(i, p) * l.get(j, p);
                }
                l.set(i, j, v / djj);
            }
        }
        Ok(l)
    }

    fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::structural(format!(
                "shape mismatch: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }
}

/// Solves `L y = b` for lower-triangular `L` (forward substitution).
pub fn forward_substitute<T: Scalar>(l: &Matrix<T>, b: &[T]) -> Result<Vec<T>> {
    if l.rows() != l.cols() || b.len() != l.rows() {
        return Err(Error::structural("triangular solve shape mismatch"));
    }
    let mut y = vec![T::zero(); b.len()];
    for i in 0..b.len() {
        let mut v = b[i];
        for (p, &yp) in y.iter().enumerate().take(i) {
            v -= l.get(i, p) * yp;
        }
        y[i] = v / l.get(i, i);
    }
    Ok(y)
}

/// Returns `acc + scale * x`.
pub fn axpy_accumulate<T: Scalar>(mut acc: Matrix<T>, scale: T, x: &Matrix<T>) -> Result<Matrix<T>> {
    acc.axpy(scale, x)?;
    Ok(acc)
}

/// One layer's low-rank update `ΔW = B A` with `B: d×r`, `A: r×k`.
///
/// `alpha` is stored separately from the factors; the `alpha / r` scaling is
/// applied only when a delta is materialised.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair<T> {
    layer_name: String,
    b: Matrix<T>,
    a: Matrix<T>,
    alpha: f64,
}

impl<T: Scalar> LoraPair<T> {
    pub fn new(layer_name: impl Into<String>, b: Matrix<T>, a: Matrix<T>, alpha: f64) -> Result<Self> {
        let layer_name = layer_name.into();
        if b.cols() != a.rows() {
            return Err(Error::structural(format!(
                "layer `{layer_name}`: B is {}x{} but A is {}x{}",
                b.rows(),
                b.cols(),
                a.rows(),
                a.cols()
            )));
        }
        let rank = b.cols();
        if rank > b.rows().min(a.cols()) {
            return Err(Error::structural(format!(
                "layer `{layer_name}`: rank {rank} exceeds min(d, k) = {}",
                b.rows().min(a.cols())
            )));
        }
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::usage(format!(
                "layer `{layer_name}`: alpha must be positive, got {alpha}"
            )));
        }
        Ok(Self { layer_name, b, a, alpha })
    }

    pub fn layer_name(&self) -> &str {
        &self.layer_name
    }

    pub fn b(&self) -> &Matrix<T> {
        &self.b
    }

    pub fn a(&self) -> &Matrix<T> {
        &self.a
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn rank(&self) -> usize {
        self.b.cols()
    }

    /// Output dimension `d`.
    pub fn out_dim(&self) -> usize {
        self.b.rows()
    }

    /// Input dimension `k`.
    pub fn in_dim(&self) -> usize {
        self.a.cols()
    }

    /// `alpha / rank`.
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    /// Strict low-rank condition `r < min(d, k)`.
    pub fn is_low_rank(&self) -> bool {
        self.rank() < self.out_dim().min(self.in_dim())
    }

    pub fn delta(&self, apply_scaling: bool) -> Matrix<T> {
        let ba = self
            .b
            .matmul(&self.a)
            .expect("factor shapes are checked on construction");
        if apply_scaling {
            ba.scaled(T::of(self.scaling()))
        } else {
            ba
        }
    }

    pub fn cast<U: Scalar>(&self) -> LoraPair<U> {
        LoraPair {
            layer_name: self.layer_name.clone(),
            b: self.b.cast(),
            a: self.a.cast(),
            alpha: self.alpha,
        }
    }
}

/// Shape summary of one adapted layer, used to check that adapters can be merged.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct LayerShape {
    pub name: String,
    pub out_dim: usize,
    pub in_dim: usize,
    pub rank: usize,
}

/// All per-layer adapters trained for one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSet<T> {
    adapter_id: String,
    layers: BTreeMap<String, LoraPair<T>>,
    pub metadata: BTreeMap<String, String>,
}

impl<T: Scalar> AdapterSet<T> {
    pub fn new(adapter_id: impl Into<String>, layers: Vec<LoraPair<T>>) -> Result<Self> {
        let adapter_id = adapter_id.into();
        if layers.is_empty() {
            return Err(Error::usage(format!("adapter `{adapter_id}` has no layers")));
        }
        let mut map = BTreeMap::new();
        for pair in layers {
            let name = pair.layer_name().to_owned();
            if map.insert(name.clone(), pair).is_some() {
                return Err(Error::structural(format!(
                    "adapter `{adapter_id}` lists layer `{name}` twice"
                )));
            }
        }
        Ok(Self {
            adapter_id,
            layers: map,
            metadata: BTreeMap::new(),
        })
    }

    pub fn with_metadata(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.metadata.insert(key.into(), value.into());
        self
    }

    pub fn adapter_id(&self) -> &str {
        &self.adapter_id
    }

    pub fn layers(&self) -> impl Iterator<Item = &LoraPair<T>> {
        self.layers.values()
    }

    pub fn layer(&self, name: &str) -> Option<&LoraPair<T>> {
        self.layers.get(name)
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn shapes(&self) -> Vec<LayerShape> {
        self.layers
            .values()
            .map(|p| LayerShape {
                name: p.layer_name().to_owned(),
                out_dim: p.out_dim(),
                in_dim: p.in_dim(),
                rank: p.rank(),
            })
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.values().all(|p| p.b().is_finite() && p.a().is_finite())
    }

    /// Fails unless both sets adapt the same layers with the same shapes and rank.
    pub fn check_compatible<U: Scalar>(&self, other: &AdapterSet<U>) -> Result<()> {
        let (mine, theirs) = (self.shapes(), other.shapes());
        if mine.len() != theirs.len() {
            return Err(Error::structural(format!(
                "adapter `{}` has {} layers, `{}` has {}",
                self.adapter_id,
                mine.len(),
                other.adapter_id(),
                theirs.len()
            )));
        }
        for (a, b) in mine.iter().zip(&theirs) {
            if a != b {
                return Err(Error::structural(format!(
                    "adapter `{}` layer `{}` ({}x{}, rank {}) does not match `{}` layer `{}` ({}x{}, rank {})",
                    other.adapter_id(),
                    b.name,
                    b.out_dim,
                    b.in_dim,
                    b.rank,
                    self.adapter_id,
                    a.name,
                    a.out_dim,
                    a.in_dim,
                    a.rank
                )));
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> AdapterSet<U> {
        AdapterSet {
            adapter_id: self.adapter_id.clone(),
            layers: self
                .layers
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
            metadata: self.metadata.clone(),
        }
    }
}
