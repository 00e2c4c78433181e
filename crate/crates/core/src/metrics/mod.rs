//! Quality measures for sets of counterfactuals.
//!
//! Every metric works on raw feature vectors aligned with their factuals.
//! Changes are detected with an absolute tolerance of [`CHANGE_TOL`].

use crate::domain::{FeatureKind, FeatureSchema, Outcome, PreferenceWeights};
use crate::engine::CounterfactualResult;
use crate::models::{KnnIndex, ModelError, Predictor};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

pub const CHANGE_TOL: f64 = 1e-9;

/// Fewest converged results [`preference_alignment`] accepts.
pub const MIN_ALIGNMENT_RESULTS: usize = 10;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("empty counterfactual set")]
    EmptySet,
    #[error("{cfs} counterfactuals for {factuals} factuals")]
    LengthMismatch { cfs: usize, factuals: usize },
    #[error("feature {0} has zero range in the reference data")]
    DegenerateRange(String),
    #[error("diversity needs at least two counterfactuals, got {0}")]
    TooFewCfs(usize),
    #[error("alignment needs at least {required} converged results, got {found}")]
    TooFewResults { found: usize, required: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn check_aligned(cfs: &[Vec<f64>], factuals: &[Vec<f64>]) -> Result<(), MetricsError> {
    if cfs.is_empty() {
        return Err(MetricsError::EmptySet);
    }
    if cfs.len() != factuals.len() {
        return Err(MetricsError::LengthMismatch {
            cfs: cfs.len(),
            factuals: factuals.len(),
        });
    }
    Ok(())
}

fn changed(a: f64, b: f64) -> bool {
    (a - b).abs() > CHANGE_TOL
}

/// Share of counterfactuals the simulator places in `target` while placing
/// their factual elsewhere.
pub fn validity(
    cfs: &[Vec<f64>],
    factuals: &[Vec<f64>],
    simulator: &dyn Predictor,
    target: Outcome,
) -> Result<f64, MetricsError> {
    check_aligned(cfs, factuals)?;
    let flipped: Vec<bool> = cfs
        .par_iter()
        .zip(factuals)
        .map(|(cf, x)| -> Result<bool, ModelError> {
            let before = simulator.predict_class(x)?;
            let after = simulator.predict_class(cf)?;
            Ok(after == target && before != target)
        })
        .collect::<Result<_, _>>()?;
    Ok(rate(&flipped))
}

/// Share of counterfactuals whose `k` nearest reference samples vote `target`.
pub fn nn_test(cfs: &[Vec<f64>], reference: &KnnIndex, k: usize, target: Outcome) -> Result<f64, MetricsError> {
    if cfs.is_empty() {
        return Err(MetricsError::EmptySet);
    }
    let hits: Vec<bool> = cfs
        .par_iter()
        .map(|cf| reference.vote(cf, k).map(|(label, _)| label == target))
        .collect::<Result<_, _>>()?;
    Ok(rate(&hits))
}

fn rate(flags: &[bool]) -> f64 {
    flags.iter().filter(|&&b| b).count() as f64 / flags.len() as f64
}

/// Range-normalized Euclidean distance over the continuous features.
pub fn proximity(cf: &[f64], factual: &[f64], ranges: &[f64], schema: &FeatureSchema) -> Result<f64, MetricsError> {
    let mut sq = 0.0;
    for (j, f) in schema.features.iter().enumerate() {
        if f.kind != FeatureKind::Continuous {
            continue;
        }
        if !(ranges[j] > 0.0) {
            return Err(MetricsError::DegenerateRange(f.name.clone()));
        }
        sq += ((cf[j] - factual[j]) / ranges[j]).powi(2);
    }
    Ok(sq.sqrt())
}

pub fn mean_proximity(
    cfs: &[Vec<f64>],
    factuals: &[Vec<f64>],
    ranges: &[f64],
    schema: &FeatureSchema,
) -> Result<f64, MetricsError> {
    check_aligned(cfs, factuals)?;
    let mut total = 0.0;
    for (cf, x) in cfs.iter().zip(factuals) {
        total += proximity(cf, x, ranges, schema)?;
    }
    Ok(total / cfs.len() as f64)
}

/// Mean number of changed features per counterfactual.
pub fn sparsity(cfs: &[Vec<f64>], factuals: &[Vec<f64>]) -> Result<f64, MetricsError> {
    check_aligned(cfs, factuals)?;
    let total: usize = cfs
        .iter()
        .zip(factuals)
        .map(|(cf, x)| cf.iter().zip(x).filter(|(a, b)| changed(**a, **b)).count())
        .sum();
    Ok(total as f64 / cfs.len() as f64)
}

/// Mean number of changed non-modifiable features per counterfactual.
pub fn violations(cfs: &[Vec<f64>], factuals: &[Vec<f64>], schema: &FeatureSchema) -> Result<f64, MetricsError> {
    check_aligned(cfs, factuals)?;
    let total: usize = cfs
        .iter()
        .zip(factuals)
        .map(|(cf, x)| {
            (0..schema.len())
                .filter(|&j| !schema.features[j].modifiable && changed(cf[j], x[j]))
                .count()
        })
        .sum();
    Ok(total as f64 / cfs.len() as f64)
}

/// Per-feature `(min, max)` over `rows`.
pub fn observed_bounds(rows: &[Vec<f64>]) -> Vec<(f64, f64)> {
    let d = rows.first().map_or(0, |r| r.len());
    (0..d)
        .map(|j| {
            rows.iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r[j]), hi.max(r[j])))
        })
        .collect()
}

/// Share of counterfactuals with every feature inside the reference
/// `[min, max]`.
pub fn plausibility(cfs: &[Vec<f64>], reference: &[Vec<f64>]) -> Result<f64, MetricsError> {
    if cfs.is_empty() || reference.is_empty() {
        return Err(MetricsError::EmptySet);
    }
    let bounds = observed_bounds(reference);
    let inside: Vec<bool> = cfs
        .iter()
        .map(|cf| cf.iter().zip(&bounds).all(|(v, (lo, hi))| lo <= v && v <= hi))
        .collect();
    Ok(rate(&inside))
}

/// `Σ_{i≠j} |x_i[k] − x_j[k]| / n` over ordered pairs of the `n`
/// counterfactuals.
pub fn feature_diversity(cfs: &[Vec<f64>], k: usize) -> Result<f64, MetricsError> {
    let n = cfs.len();
    if n < 2 {
        return Err(MetricsError::TooFewCfs(n));
    }
    let mut values: Vec<f64> = cfs.iter().map(|c| c[k]).collect();
    values.sort_by(f64::total_cmp);
    // each sorted value v_i sits above i others and below n − 1 − i others
    let unordered: f64 = values
        .iter()
        .enumerate()
        .map(|(i, v)| v * (2.0 * i as f64 - (n - 1) as f64))
        .sum();
    Ok(2.0 * unordered / n as f64)
}

/// Preference weights against realized change, per lever.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    pub features: Vec<String>,
    /// `w_p + w_u`, scaled so the largest is 1.
    pub weights: Vec<f64>,
    /// Mean `|Δ| / scale` over converged results, scaled so the largest is 1.
    pub changes: Vec<f64>,
    /// Pearson correlation of the two vectors; `None` when either is constant.
    pub correlation: Option<f64>,
    pub n_results: usize,
}

/// Correlates combined preference weight with mean change per lever.
/// `scales` divides each feature's change so levers in different units
/// are comparable.
pub fn preference_alignment(
    results: &[CounterfactualResult],
    weights: &PreferenceWeights,
    scales: &[f64],
    schema: &FeatureSchema,
) -> Result<Alignment, MetricsError> {
    let converged: Vec<&CounterfactualResult> = results.iter().filter(|r| r.converged).collect();
    if converged.len() < MIN_ALIGNMENT_RESULTS {
        return Err(MetricsError::TooFewResults {
            found: converged.len(),
            required: MIN_ALIGNMENT_RESULTS,
        });
    }
    let levers = schema.modifiable_indices();
    let w: Vec<f64> = levers.iter().map(|&i| weights.combined(i)).collect();
    let c: Vec<f64> = levers
        .iter()
        .map(|&i| {
            let s = if scales[i] > 0.0 { scales[i] } else { 1.0 };
            converged
                .iter()
                .map(|r| (r.counterfactual[i] - r.factual[i]).abs() / s)
                .sum::<f64>()
                / converged.len() as f64
        })
        .collect();
    let (weights, changes) = (scale_to_unit_max(&w), scale_to_unit_max(&c));
    Ok(Alignment {
        features: levers.iter().map(|&i| schema.features[i].name.clone()).collect(),
        correlation: pearson(&weights, &changes),
        weights,
        changes,
        n_results: converged.len(),
    })
}

fn scale_to_unit_max(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(0.0, f64::max);
    if m > 0.0 {
        v.iter().map(|x| x / m).collect()
    } else {
        v.to_vec()
    }
}

/// Sample Pearson correlation; `None` if either input has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa <= 1e-300 || sbb <= 1e-300 {
        return None;
    }
    Some(sab / (saa * sbb).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureValue {
    pub feature: String,
    pub value: f64,
}

/// Summary row for one generator over one counterfactual set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub generator: String,
    pub n_factuals: usize,
    pub n_converged: usize,
    pub validity: f64,
    pub nn_test: f64,
    pub proximity: f64,
    pub sparsity: f64,
    pub violations: f64,
    pub plausibility: f64,
    /// Diversity per modifiable feature, in schema order.
    pub diversity: Vec<FeatureValue>,
}

/// Everything needed to score one counterfactual set.
pub struct MetricInputs<'a> {
    pub schema: &'a FeatureSchema,
    pub target: Outcome,
    pub simulator: &'a dyn Predictor,
    /// Neighbors for the NN test.
    pub nn_reference: &'a KnnIndex,
    pub k: usize,
    /// Per-feature ranges dividing proximity terms.
    pub ranges: &'a [f64],
    /// Rows whose per-feature box defines plausibility.
    pub plausibility_reference: &'a [Vec<f64>],
}

impl MetricsReport {
    pub fn compute(
        generator: &str,
        factuals: &[Vec<f64>],
        cfs: &[Vec<f64>],
        n_converged: usize,
        inputs: &MetricInputs<'_>,
    ) -> Result<Self, MetricsError> {
        let diversity = inputs
            .schema
            .modifiable_indices()
            .into_iter()
            .map(|k| {
                Ok(FeatureValue {
                    feature: inputs.schema.features[k].name.clone(),
                    value: feature_diversity(cfs, k)?,
                })
            })
            .collect::<Result<_, MetricsError>>()?;
        Ok(Self {
            generator: generator.to_string(),
            n_factuals: factuals.len(),
            n_converged,
            validity: validity(cfs, factuals, inputs.simulator, inputs.target)?,
            nn_test: nn_test(cfs, inputs.nn_reference, inputs.k, inputs.target)?,
            proximity: mean_proximity(cfs, factuals, inputs.ranges, inputs.schema)?,
            sparsity: sparsity(cfs, factuals)?,
            violations: violations(cfs, factuals, inputs.schema)?,
            plausibility: plausibility(cfs, inputs.plausibility_reference)?,
            diversity,
        })
    }

    /// Checks the range guarantees of every field.
    pub fn check(&self, n_features: usize) -> Result<(), String> {
        for (name, v) in [
            ("validity", self.validity),
            ("nn_test", self.nn_test),
            ("plausibility", self.plausibility),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(format!("{name} = {v} outside [0, 1]"));
            }
        }
        if !(0.0..=n_features as f64).contains(&self.sparsity) {
            return Err(format!("sparsity {} outside [0, {n_features}]", self.sparsity));
        }
        if !(self.violations >= 0.0 && self.proximity >= 0.0) {
            return Err("negative violations or proximity".into());
        }
        Ok(())
    }
}

/// Aligned plain-text table, one row per report.
pub fn render_table(reports: &[MetricsReport]) -> String {
    let header = [
        "generator",
        "n",
        "converged",
        "validity",
        "nn_test",
        "proximity",
        "sparsity",
        "violations",
        "plausibility",
    ];
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            vec![
                r.generator.clone(),
                r.n_factuals.to_string(),
                r.n_converged.to_string(),
                format!("{:.3}", r.validity),
                format!("{:.3}", r.nn_test),
                format!("{:.3}", r.proximity),
                format!("{:.3}", r.sparsity),
                format!("{:.3}", r.violations),
                format!("{:.3}", r.plausibility),
            ]
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|c| rows.iter().map(|r| r[c].len()).chain([header[c].len()]).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    let line = |cells: Vec<&str>, out: &mut String| {
        let padded: Vec<String> = cells
            .iter()
            .enumerate()
            .map(|(c, s)| {
                if c == 0 {
                    format!("{s:<w$}", w = widths[c])
                } else {
                    format!("{s:>w$}", w = widths[c])
                }
            })
            .collect();
        let _ = writeln!(out, "{}", padded.join("  ").trim_end());
    };
    line(header.to_vec(), &mut out);
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    line(rule.iter().map(String::as_str).collect(), &mut out);
    for r in &rows {
        line(r.iter().map(String::as_str).collect(), &mut out);
    }
    out
}
