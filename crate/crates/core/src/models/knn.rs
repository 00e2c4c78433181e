//! k-nearest-neighbor voting over raw feature vectors.

use super::ModelError;
use crate::domain::{FactualSample, FeatureKind, FeatureSchema, Outcome};

/// Training points with the per-feature ranges used to normalize distances.
///
/// Distance is the Euclidean norm of range-normalized continuous
/// differences plus the Hamming count of mismatched nominal features.
#[derive(Debug, Clone)]
pub struct KnnIndex {
    rows: Vec<Vec<f64>>,
    labels: Vec<Outcome>,
    kinds: Vec<FeatureKind>,
    ranges: Vec<f64>,
}

impl KnnIndex {
    pub fn new(schema: &FeatureSchema, samples: &[FactualSample]) -> Result<Self, ModelError> {
        let rows: Vec<Vec<f64>> = samples.iter().map(|s| s.features()).collect();
        let labels = samples.iter().map(|s| s.outcome).collect();
        Self::from_rows(schema, rows, labels)
    }

    pub fn from_rows(schema: &FeatureSchema, rows: Vec<Vec<f64>>, labels: Vec<Outcome>) -> Result<Self, ModelError> {
        if rows.is_empty() {
            return Err(ModelError::EmptyTrainingSet);
        }
        let kinds = schema.kinds();
        let ranges = feature_ranges(&rows);
        Ok(Self { rows, labels, kinds, ranges })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn ranges(&self) -> &[f64] {
        &self.ranges
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i]
    }

    pub fn label(&self, i: usize) -> Outcome {
        self.labels[i]
    }

    pub fn distance(&self, a: &[f64], b: &[f64]) -> f64 {
        mixed_distance(&self.kinds, &self.ranges, a, b)
    }

    /// Indices of the `k` nearest rows, closest first; ties go to the lower index.
    pub fn nearest(&self, query: &[f64], k: usize) -> Vec<usize> {
        let mut d: Vec<(f64, usize)> = self
            .rows
            .iter()
            .enumerate()
            .map(|(i, r)| (self.distance(query, r), i))
            .collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        d.into_iter().take(k).map(|(_, i)| i).collect()
    }

    /// Nearest row whose label is `class`.
    pub fn nearest_of_class(&self, query: &[f64], class: Outcome) -> Option<usize> {
        (0..self.rows.len())
            .filter(|&i| self.labels[i] == class)
            .map(|i| (self.distance(query, &self.rows[i]), i))
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
            .map(|(_, i)| i)
    }

    /// Majority label among the `k` nearest rows and the share voting for it.
    pub fn vote(&self, query: &[f64], k: usize) -> Result<(Outcome, f64), ModelError> {
        if k == 0 || k % 2 == 0 || k > self.rows.len() {
            return Err(ModelError::InvalidK { k, n: self.rows.len() });
        }
        let hyper = self
            .nearest(query, k)
            .into_iter()
            .filter(|&i| self.labels[i] == Outcome::Hyperglycemia)
            .count();
        let normo = k - hyper;
        Ok(if hyper > normo {
            (Outcome::Hyperglycemia, hyper as f64 / k as f64)
        } else {
            (Outcome::Normoglycemia, normo as f64 / k as f64)
        })
    }
}

/// Observed `max − min` per column.
pub fn feature_ranges(rows: &[Vec<f64>]) -> Vec<f64> {
    let d = rows.first().map_or(0, |r| r.len());
    (0..d)
        .map(|j| {
            let (lo, hi) = rows
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r[j]), hi.max(r[j])));
            hi - lo
        })
        .collect()
}

/// Range-normalized Euclidean distance on continuous features plus the
/// number of differing nominal features. Zero-range columns are skipped.
pub fn mixed_distance(kinds: &[FeatureKind], ranges: &[f64], a: &[f64], b: &[f64]) -> f64 {
    let mut sq = 0.0;
    let mut hamming = 0.0;
    for j in 0..kinds.len() {
        match kinds[j] {
            FeatureKind::Nominal => hamming += (a[j] != b[j]) as u8 as f64,
            FeatureKind::Continuous if ranges[j] > 0.0 => sq += ((a[j] - b[j]) / ranges[j]).powi(2),
            FeatureKind::Continuous => {}
        }
    }
    sq.sqrt() + hamming
}

/// One-shot vote against a training set.
pub fn knn_vote(
    schema: &FeatureSchema,
    train: &[FactualSample],
    query: &FactualSample,
    k: usize,
) -> Result<(Outcome, f64), ModelError> {
    KnnIndex::new(schema, train)?.vote(&query.features(), k)
}
