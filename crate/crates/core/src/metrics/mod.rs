//! Segmentation metrics, benchmark aggregation and explainability reports.

mod report;
mod svg;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::FusionPlan;

pub use report::{
    read_contribution_csv, write_contribution_csv, write_metric_table_csv, write_pairs_csv, write_sweep_csv,
    ReportHeader,
};
pub use svg::{render_heatmap_svg, render_pies_svg};

/// Counts with rows = ground truth class, cols = predicted class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    class_count: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(class_count: usize) -> Self {
        assert!(class_count > 0, "class count must be positive");
        Self {
            class_count,
            counts: vec![0; class_count * class_count],
        }
    }

    pub fn from_labels(class_count: usize, truth: &[usize], predicted: &[usize]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::usage(format!(
                "{} ground-truth labels but {} predictions",
                truth.len(),
                predicted.len()
            )));
        }
        let mut cm = Self::new(class_count);
        for (&t, &p) in truth.iter().zip(predicted) {
            cm.add(t, p)?;
        }
        Ok(cm)
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn add(&mut self, truth: usize, predicted: usize) -> Result<()> {
        if truth >= self.class_count || predicted >= self.class_count {
            return Err(Error::usage(format!(
                "label ({truth}, {predicted}) out of range for {} classes",
                self.class_count
            )));
        }
        self.counts[truth * self.class_count + predicted] += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if other.class_count != self.class_count {
            return Err(Error::structural("confusion matrices have different class counts"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn count(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.class_count + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let correct: u64 = (0..self.class_count).map(|c| self.count(c, c)).sum();
        correct as f64 / self.total().max(1) as f64
    }

    /// IoU per class; `None` where the class is absent from both truth and prediction.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        let c = self.class_count;
        (0..c)
            .map(|k| {
                let tp = self.count(k, k);
                let gt: u64 = (0..c).map(|p| self.count(k, p)).sum();
                let pred: u64 = (0..c).map(|t| self.count(t, k)).sum();
                let union = gt + pred - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    /// Mean IoU over classes present in truth or prediction.
    pub fn miou(&self) -> Result<f64> {
        let ious: Vec<f64> = self.per_class_iou().into_iter().flatten().collect();
        if ious.is_empty() {
            return Err(Error::usage("mIoU is undefined: no class occurs in truth or prediction"));
        }
        Ok(ious.iter().sum::<f64>() / ious.len() as f64)
    }
}

/// `n / Σ 1/v_i`.
pub fn harmonic_mean(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::usage("harmonic mean of an empty list"));
    }
    if let Some(v) = values.iter().find(|v| !(**v > 0.0)) {
        return Err(Error::usage(format!("harmonic mean needs positive values, got {v}")));
    }
    Ok(values.len() as f64 / values.iter().map(|v| 1.0 / v).sum::<f64>())
}

/// `Σ w_i / d_i` over a plan. Exact matches (distance ≤ `epsilon_exact`) return `1 / epsilon_exact`.
pub fn support_score(plan: &FusionPlan, epsilon_exact: f64) -> f64 {
    let cap = 1.0 / epsilon_exact;
    if plan.selected.iter().any(|e| e.distance <= epsilon_exact) {
        return cap;
    }
    plan.selected
        .iter()
        .map(|e| e.weight / e.distance)
        .sum::<f64>()
        .min(cap)
}

/// Pearson correlation and least-squares line of `y` on `x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub pearson_r: f64,
    pub slope: f64,
    pub intercept: f64,
    pub n: usize,
}

pub fn distance_performance_correlation(pairs: &[(f64, f64)]) -> Result<Correlation> {
    if pairs.len() < 3 {
        return Err(Error::usage(format!(
            "correlation needs at least 3 pairs, got {}",
            pairs.len()
        )));
    }
    let n = pairs.len() as f64;
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for &(x, y) in pairs {
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
        sxy += (x - mx) * (y - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Err(Error::usage("correlation is undefined for zero-variance data"));
    }
    let slope = sxy / sxx;
    Ok(Correlation {
        pearson_r: sxy / (sxx.sqrt() * syy.sqrt()),
        slope,
        intercept: my - slope * mx,
        n: pairs.len(),
    })
}

/// Mean fusion weight per (test domain, library adapter).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContributionMatrix {
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    /// `None` marks a structurally absent cell (the adapter was not in the library for that row).
    pub cells: Vec<Vec<Option<f64>>>,
}

impl ContributionMatrix {
    pub fn cell(&self, row: &str, col: &str) -> Option<f64> {
        let r = self.rows.iter().position(|x| x == row)?;
        let c = self.cols.iter().position(|x| x == col)?;
        self.cells[r][c]
    }

    pub fn row_sum(&self, row: usize) -> f64 {
        self.cells[row].iter().flatten().sum()
    }

    /// Columns of one row ordered by descending weight.
    pub fn ranked(&self, row: &str) -> Vec<(String, f64)> {
        let Some(r) = self.rows.iter().position(|x| x == row) else {
            return Vec::new();
        };
        let mut v: Vec<_> = self
            .cols
            .iter()
            .zip(&self.cells[r])
            .filter_map(|(c, w)| w.map(|w| (c.clone(), w)))
            .collect();
        v.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        v
    }

    /// Copy with cells below `threshold` blanked, for display.
    pub fn masked(&self, threshold: f64) -> Self {
        Self {
            rows: self.rows.clone(),
            cols: self.cols.clone(),
            cells: self
                .cells
                .iter()
                .map(|row| row.iter().map(|c| c.filter(|w| *w >= threshold)).collect())
                .collect(),
        }
    }
}

/// Order-independent accumulator of plans into a [`ContributionMatrix`].
#[derive(Debug, Clone, Default)]
pub struct ContributionAccumulator {
    columns: BTreeSet<String>,
    sums: BTreeMap<String, BTreeMap<String, f64>>,
    plans: BTreeMap<String, usize>,
    absent: BTreeMap<String, BTreeSet<String>>,
}

impl ContributionAccumulator {
    /// `columns` lists every adapter that can appear.
    pub fn new(columns: impl IntoIterator<Item = String>) -> Self {
        Self {
            columns: columns.into_iter().collect(),
            ..Self::default()
        }
    }

    /// Marks an adapter as unavailable for a test domain (the held-out adapter under leave-one-out).
    pub fn mark_absent(&mut self, test_domain: &str, adapter: &str) {
        self.absent
            .entry(test_domain.to_owned())
            .or_default()
            .insert(adapter.to_owned());
    }

    pub fn add(&mut self, test_domain: &str, plan: &FusionPlan) {
        let sums = self.sums.entry(test_domain.to_owned()).or_default();
        for e in &plan.selected {
            self.columns.insert(e.domain_id.clone());
            *sums.entry(e.domain_id.clone()).or_default() += e.weight;
        }
        *self.plans.entry(test_domain.to_owned()).or_default() += 1;
    }

    pub fn merge(&mut self, other: ContributionAccumulator) {
        self.columns.extend(other.columns);
        for (row, sums) in other.sums {
            let mine = self.sums.entry(row).or_default();
            for (col, s) in sums {
                *mine.entry(col).or_default() += s;
            }
        }
        for (row, n) in other.plans {
            *self.plans.entry(row).or_default() += n;
        }
        for (row, cols) in other.absent {
            self.absent.entry(row).or_default().extend(cols);
        }
    }

    pub fn finish(&self) -> Result<ContributionMatrix> {
        if self.plans.is_empty() {
            return Err(Error::usage("contribution matrix needs at least one plan"));
        }
        let rows: Vec<String> = self.plans.keys().cloned().collect();
        let cols: Vec<String> = self.columns.iter().cloned().collect();
        let empty = BTreeSet::new();
        let cells = rows
            .iter()
            .map(|row| {
                let n = self.plans[row] as f64;
                let sums = self.sums.get(row);
                let absent = self.absent.get(row).unwrap_or(&empty);
                cols.iter()
                    .map(|col| {
                        if absent.contains(col) {
                            None
                        } else {
                            Some(sums.and_then(|s| s.get(col)).copied().unwrap_or(0.0) / n)
                        }
                    })
                    .collect()
            })
            .collect();
        Ok(ContributionMatrix { rows, cols, cells })
    }
}

/// Per-domain scores for several methods (rows = domains, cols = methods).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    pub methods: Vec<String>,
    pub domains: Vec<String>,
    /// `values[domain][method]`.
    pub values: Vec<Vec<f64>>,
    /// Domains shown but left out of the harmonic mean.
    #[serde(default)]
    pub excluded: BTreeSet<String>,
}

impl MetricTable {
    pub fn new(methods: Vec<String>) -> Self {
        Self {
            methods,
            domains: Vec::new(),
            values: Vec::new(),
            excluded: BTreeSet::new(),
        }
    }

    pub fn push(&mut self, domain: impl Into<String>, values: Vec<f64>) {
        assert_eq!(values.len(), self.methods.len(), "one value per method");
        self.domains.push(domain.into());
        self.values.push(values);
    }

    pub fn method_index(&self, method: &str) -> Option<usize> {
        self.methods.iter().position(|m| m == method)
    }

    pub fn get(&self, domain: &str, method: &str) -> Option<f64> {
        let d = self.domains.iter().position(|x| x == domain)?;
        Some(self.values[d][self.method_index(method)?])
    }

    pub fn column(&self, method: &str) -> Option<Vec<f64>> {
        let m = self.method_index(method)?;
        Some(self.values.iter().map(|row| row[m]).collect())
    }

    /// Harmonic mean of one method over the included domains.
    pub fn h_mean(&self, method: &str) -> Result<f64> {
        let m = self
            .method_index(method)
            .ok_or_else(|| Error::usage(format!("unknown method `{method}`")))?;
        let vals: Vec<f64> = self
            .domains
            .iter()
            .zip(&self.values)
            .filter(|(d, _)| !self.excluded.contains(*d))
            .map(|(_, row)| row[m])
            .collect();
        harmonic_mean(&vals)
    }

    pub fn h_means(&self) -> Result<Vec<f64>> {
        self.methods.iter().map(|m| self.h_mean(m)).collect()
    }
}
