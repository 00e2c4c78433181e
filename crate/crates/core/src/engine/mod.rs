//! Greedy saliency-guided counterfactual search.
//!
//! Starting from a factual context, each iteration probes every unmasked
//! lever with a one-sided finite difference, scores the levers by
//! normalized saliency plus stakeholder preference, and moves the winner by
//! one step in the direction that raises the target-class probability. A
//! lever that hits its bound is clamped and masked for the rest of the run.

use crate::domain::{DomainError, FactualSample, FeatureSchema, Outcome, PreferenceWeights};
use crate::models::{KnnIndex, ModelError, Predictor};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::time::Instant;

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("feature {0} is not modifiable")]
    NotModifiable(usize),
    #[error("feature {0} is masked")]
    MaskedFeature(usize),
    #[error("invalid counterfactual parameters: {0}")]
    InvalidParams(String),
    #[error("invalid sample: {0}")]
    InvalidSample(#[from] DomainError),
    #[error("predictor failed at iteration {iteration}: {source}")]
    Predictor {
        iteration: usize,
        #[source]
        source: ModelError,
    },
    #[error("no training instance of class {0:?}")]
    NoTargetClassInstance(Outcome),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CfParams {
    pub target: Outcome,
    pub gamma: f64,
    pub max_iter: usize,
    pub plateau_eps: f64,
    pub plateau_patience: usize,
    pub schema: FeatureSchema,
    pub weights: PreferenceWeights,
}

impl CfParams {
    /// Normoglycemia target, γ = 0.6, 200 iterations, plateau after 10
    /// rounds gaining less than 1e-6.
    pub fn new(schema: FeatureSchema, weights: PreferenceWeights) -> Self {
        Self {
            target: Outcome::Normoglycemia,
            gamma: 0.6,
            max_iter: 200,
            plateau_eps: 1e-6,
            plateau_patience: 10,
            schema,
            weights,
        }
    }

    /// Unit weights on every feature.
    pub fn with_unit_weights(schema: FeatureSchema) -> Self {
        let w = PreferenceWeights::uniform(schema.len(), 1.0);
        Self::new(schema, w)
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        let bad = |m: String| Err(EngineError::InvalidParams(m));
        if !(self.gamma >= 0.5 && self.gamma < 1.0) {
            return bad(format!("gamma {} must be in [0.5, 1)", self.gamma));
        }
        if self.max_iter == 0 || self.plateau_patience == 0 {
            return bad("max_iter and plateau_patience must be at least 1".into());
        }
        if !(self.plateau_eps >= 0.0) {
            return bad("plateau_eps must be non-negative".into());
        }
        if self.weights.len() != self.schema.len() {
            return bad(format!(
                "{} weights for {} features",
                self.weights.len(),
                self.schema.len()
            ));
        }
        self.schema.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// Target confidence reached.
    Converged,
    MaxIterations,
    /// Confidence stopped improving for `plateau_patience` rounds.
    Plateau,
    /// Every lever has been clamped.
    MaskExhausted,
    /// No unmasked lever has nonzero saliency.
    NoSalientFeature,
}

/// One iteration of the search.
///
/// `scores` is `None` for features that can never be selected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationTrace {
    pub iteration: usize,
    pub saliency: Vec<f64>,
    pub scores: Vec<Option<f64>>,
    pub chosen: usize,
    /// Signed step `sign(S_i)·δ_i` before clamping.
    pub step: f64,
    /// Feature value after the step (and clamp).
    pub value: f64,
    pub clamped: bool,
    pub mask: Vec<u8>,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualResult {
    pub factual: Vec<f64>,
    pub counterfactual: Vec<f64>,
    pub converged: bool,
    pub stop_reason: StopReason,
    pub iterations: usize,
    pub initial_confidence: f64,
    pub final_confidence: f64,
    /// Levers that started outside their box and were moved onto it.
    pub projected: Vec<usize>,
    pub predictor_calls: usize,
    pub trajectory: Vec<IterationTrace>,
    pub wall_time_s: f64,
}

impl CounterfactualResult {
    /// Indices whose value differs from the factual by more than 1e-9.
    pub fn changed_features(&self) -> Vec<usize> {
        self.factual
            .iter()
            .zip(&self.counterfactual)
            .enumerate()
            .filter(|(_, (a, b))| (*a - *b).abs() > 1e-9)
            .map(|(i, _)| i)
            .collect()
    }

    /// Checks the hard guarantees: untouched non-levers, in-box levers,
    /// bounded iteration count, monotone mask and confidence consistency.
    pub fn check_invariants(&self, params: &CfParams) -> Result<(), String> {
        let schema = &params.schema;
        for (i, f) in schema.features.iter().enumerate() {
            let (a, b) = (self.factual[i], self.counterfactual[i]);
            if !f.modifiable && a != b {
                return Err(format!("non-modifiable {} changed {a} -> {b}", f.name));
            }
            if f.modifiable && !(f.min <= b && b <= f.max) {
                return Err(format!("{} = {b} outside [{}, {}]", f.name, f.min, f.max));
            }
        }
        if self.iterations > params.max_iter || self.trajectory.len() != self.iterations {
            return Err(format!("{} iterations recorded", self.iterations));
        }
        for w in self.trajectory.windows(2) {
            if w[0].mask.iter().zip(&w[1].mask).any(|(a, b)| b > a) {
                return Err(format!("mask re-enabled at iteration {}", w[1].iteration));
            }
        }
        if self.converged != (self.stop_reason == StopReason::Converged) {
            return Err("converged flag disagrees with stop reason".into());
        }
        if self.converged && self.final_confidence < params.gamma {
            return Err(format!("converged at confidence {}", self.final_confidence));
        }
        Ok(())
    }

    pub fn counterfactual_sample(&self, factual: &FactualSample) -> Result<FactualSample, DomainError> {
        factual.with_features(&self.counterfactual)
    }
}

fn target_prob(predictor: &dyn Predictor, x: &[f64], target: Outcome, iteration: usize) -> Result<f64, EngineError> {
    predictor
        .predict_proba(x)
        .map(|p| p[target.class_index()])
        .map_err(|source| EngineError::Predictor { iteration, source })
}

/// `S_i = (f_t(x + δ_i·e_i) − f_t(x)) / δ_i` in raw units.
pub fn forward_saliency(
    predictor: &dyn Predictor,
    x: &[f64],
    i: usize,
    delta: f64,
    target: Outcome,
    schema: &FeatureSchema,
) -> Result<f64, EngineError> {
    if !schema.is_modifiable(i) {
        return Err(EngineError::NotModifiable(i));
    }
    if !(delta > 0.0) {
        return Err(EngineError::InvalidParams(format!("step {delta} must be positive")));
    }
    let base = target_prob(predictor, x, target, 0)?;
    saliency_from_base(predictor, x, i, delta, target, base, 0)
}

fn saliency_from_base(
    predictor: &dyn Predictor,
    x: &[f64],
    i: usize,
    delta: f64,
    target: Outcome,
    base: f64,
    iteration: usize,
) -> Result<f64, EngineError> {
    let mut probe = x.to_vec();
    probe[i] += delta;
    Ok((target_prob(predictor, &probe, target, iteration)? - base) / delta)
}

/// `C_i = (|S_i| / max_j |S_j| + w_p[i] + w_u[i]) · M[i]` for levers, −∞ otherwise.
///
/// The normalizing maximum runs over unmasked levers; if it is zero the
/// saliency term is dropped.
pub fn combined_scores(saliency: &[f64], weights: &PreferenceWeights, mask: &[u8], schema: &FeatureSchema) -> Vec<f64> {
    let max = (0..saliency.len())
        .filter(|&i| schema.is_modifiable(i) && mask[i] == 1)
        .map(|i| saliency[i].abs())
        .fold(0.0, f64::max);
    (0..saliency.len())
        .map(|i| {
            if !schema.is_modifiable(i) {
                return f64::NEG_INFINITY;
            }
            let normalized = if max > 0.0 { saliency[i].abs() / max } else { 0.0 };
            (normalized + weights.combined(i)) * mask[i] as f64
        })
        .collect()
}

/// Highest score among unmasked levers with nonzero saliency; ties go to
/// the lowest index.
pub fn select_feature(scores: &[f64], saliency: &[f64], mask: &[u8], schema: &FeatureSchema) -> Option<usize> {
    let mut best: Option<usize> = None;
    for i in 0..scores.len() {
        if !schema.is_modifiable(i) || mask[i] == 0 || saliency[i] == 0.0 {
            continue;
        }
        if best.is_none_or(|b| scores[i] > scores[b]) {
            best = Some(i);
        }
    }
    best
}

/// Sign with `sign(0) = 0`, unlike `f64::signum`.
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Moves lever `i` by `sign(S_i)·δ_i`, clamping to the box and masking the
/// lever if the clamp engaged. Returns whether it clamped.
pub fn apply_step(
    x: &mut [f64],
    i: usize,
    saliency: f64,
    delta: f64,
    schema: &FeatureSchema,
    mask: &mut [u8],
) -> Result<bool, EngineError> {
    if !schema.is_modifiable(i) {
        return Err(EngineError::NotModifiable(i));
    }
    if mask[i] == 0 {
        return Err(EngineError::MaskedFeature(i));
    }
    let f = &schema.features[i];
    let moved = x[i] + sign(saliency) * delta;
    if moved < f.min {
        x[i] = f.min;
        mask[i] = 0;
        Ok(true)
    } else if moved > f.max {
        x[i] = f.max;
        mask[i] = 0;
        Ok(true)
    } else {
        x[i] = moved;
        Ok(false)
    }
}

/// Runs the greedy search on a raw feature vector.
pub fn generate_counterfactual(
    predictor: &dyn Predictor,
    factual: &[f64],
    params: &CfParams,
) -> Result<CounterfactualResult, EngineError> {
    let started = Instant::now();
    params.validate()?;
    let schema = &params.schema;
    schema.validate_vector(factual)?;
    let target = params.target;
    let levers = schema.modifiable_indices();

    let mut x = factual.to_vec();
    let mut projected = Vec::new();
    for &i in &levers {
        let f = &schema.features[i];
        let clamped = x[i].clamp(f.min, f.max);
        if clamped != x[i] {
            x[i] = clamped;
            projected.push(i);
        }
    }

    let mut calls = 1;
    let initial = target_prob(predictor, &x, target, 0)?;
    let mut confidence = initial;
    let mut mask: Vec<u8> = (0..schema.len()).map(|i| schema.is_modifiable(i) as u8).collect();
    let mut trajectory = Vec::new();
    let mut best = confidence;
    let mut stalled = 0;

    let stop = if confidence >= params.gamma {
        StopReason::Converged
    } else {
        let mut reason = StopReason::MaxIterations;
        for n in 1..=params.max_iter {
            let mut saliency = vec![0.0; schema.len()];
            for &i in levers.iter().filter(|&&i| mask[i] == 1) {
                saliency[i] = saliency_from_base(predictor, &x, i, schema.features[i].step, target, confidence, n)?;
                calls += 1;
            }
            let scores = combined_scores(&saliency, &params.weights, &mask, schema);
            let Some(i) = select_feature(&scores, &saliency, &mask, schema) else {
                reason = StopReason::NoSalientFeature;
                break;
            };
            let delta = schema.features[i].step;
            let clamped = apply_step(&mut x, i, saliency[i], delta, schema, &mut mask)?;
            confidence = target_prob(predictor, &x, target, n)?;
            calls += 1;
            trajectory.push(IterationTrace {
                iteration: n,
                scores: scores.iter().map(|&c| c.is_finite().then_some(c)).collect(),
                chosen: i,
                step: sign(saliency[i]) * delta,
                value: x[i],
                clamped,
                mask: mask.clone(),
                confidence,
                saliency,
            });
            if confidence >= params.gamma {
                reason = StopReason::Converged;
                break;
            }
            if levers.iter().all(|&j| mask[j] == 0) {
                reason = StopReason::MaskExhausted;
                break;
            }
            if confidence > best + params.plateau_eps {
                best = confidence;
                stalled = 0;
            } else {
                stalled += 1;
                if stalled >= params.plateau_patience {
                    reason = StopReason::Plateau;
                    break;
                }
            }
        }
        reason
    };

    Ok(CounterfactualResult {
        factual: factual.to_vec(),
        counterfactual: x,
        converged: stop == StopReason::Converged,
        stop_reason: stop,
        iterations: trajectory.len(),
        initial_confidence: initial,
        final_confidence: confidence,
        projected,
        predictor_calls: calls,
        trajectory,
        wall_time_s: started.elapsed().as_secs_f64(),
    })
}

/// Validates the sample, then runs [`generate_counterfactual`] on its features.
pub fn generate_for_sample(
    predictor: &dyn Predictor,
    sample: &FactualSample,
    params: &CfParams,
) -> Result<CounterfactualResult, EngineError> {
    sample.validate()?;
    generate_counterfactual(predictor, &sample.features(), params)
}

/// Writes one JSON object per iteration.
///
/// Fields: `iteration` (1-based), `saliency` (per feature, 0 for masked or
/// fixed features), `scores` (combined score, `null` where unselectable),
/// `chosen` (feature index), `step` (signed step), `value` (new value),
/// `clamped`, `mask` (0/1 per feature), `confidence` (target probability
/// after the step).
pub fn write_trajectory_jsonl<W: Write>(mut writer: W, result: &CounterfactualResult) -> Result<(), EngineError> {
    for t in &result.trajectory {
        serde_json::to_writer(&mut writer, t)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

/// Diagnostic terms of the multi-objective loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveTerms {
    /// `−ln f_t(x*)`.
    pub cross_entropy: f64,
    /// `Σ r_i·|x*_i − x_i| / range_i` with `r` the combined weights scaled to max 1.
    pub weighted_l1: f64,
    /// Mixed distance from `x*` to its nearest reference sample.
    pub manifold_distance: f64,
}

pub fn objective_value(
    factual: &[f64],
    counterfactual: &[f64],
    predictor: &dyn Predictor,
    params: &CfParams,
    reference: &KnnIndex,
) -> Result<ObjectiveTerms, EngineError> {
    let p = target_prob(predictor, counterfactual, params.target, 0)?;
    let combined: Vec<f64> = (0..factual.len()).map(|i| params.weights.combined(i)).collect();
    let max_w = combined.iter().copied().fold(0.0, f64::max);
    let ranges = reference.ranges();
    let weighted_l1 = (0..factual.len())
        .filter(|&i| ranges[i] > 0.0 && max_w > 0.0)
        .map(|i| combined[i] / max_w * (counterfactual[i] - factual[i]).abs() / ranges[i])
        .sum();
    let nearest = reference.nearest(counterfactual, 1);
    Ok(ObjectiveTerms {
        cross_entropy: -p.ln(),
        weighted_l1,
        manifold_distance: reference.distance(counterfactual, reference.row(nearest[0])),
    })
}

/// Nearest reference sample of the target class: a counterfactual drawn
/// straight from observed data.
pub fn nice_baseline(reference: &KnnIndex, factual: &[f64], target: Outcome) -> Result<Vec<f64>, EngineError> {
    reference
        .nearest_of_class(factual, target)
        .map(|i| reference.row(i).to_vec())
        .ok_or(EngineError::NoTargetClassInstance(target))
}

#[cfg(test)]
mod tests;
