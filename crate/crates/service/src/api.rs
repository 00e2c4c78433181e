//! Request and response bodies.

use chrono::{DateTime, Utc};
use glytwin_core::domain::{
    Ethnicity, FactualSample, FeatureSpec, Mode, Outcome, PreferenceWeights, Sex,
};
use glytwin_core::engine::{IterationTrace, StopReason};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

fn default_patient() -> String {
    "anonymous".into()
}

fn yes() -> bool {
    true
}

/// A pre-meal context. Field names match the sample CSV header; identity
/// fields and the outcome are optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleInput {
    #[serde(default = "default_patient")]
    pub patient_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meal_timestamp: Option<DateTime<Utc>>,
    pub age: u32,
    pub sex: Sex,
    pub ethnicity: Ethnicity,
    pub a1c: f64,
    pub carb_size: f64,
    pub total_bolus: f64,
    pub delta_t: f64,
    pub mode: Mode,
    pub total_basal: f64,
    pub premeal_slope: f64,
    pub premeal_bgl: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome: Option<Outcome>,
}

impl SampleInput {
    /// Full sample for validation and feature extraction. A missing outcome
    /// is filled with hyperglycemia; it never reaches a model.
    pub fn to_sample(&self) -> FactualSample {
        FactualSample {
            patient_id: self.patient_id.clone(),
            meal_timestamp: self.meal_timestamp.unwrap_or(DateTime::UNIX_EPOCH),
            age: self.age,
            sex: self.sex,
            ethnicity: self.ethnicity,
            a1c: self.a1c,
            carb_size: self.carb_size,
            total_bolus: self.total_bolus,
            delta_t: self.delta_t,
            mode: self.mode,
            total_basal: self.total_basal,
            premeal_slope: self.premeal_slope,
            premeal_bgl: self.premeal_bgl,
            outcome: self.outcome.unwrap_or(Outcome::Hyperglycemia),
        }
    }

    pub fn from_sample(s: &FactualSample, outcome: Option<Outcome>, meal_timestamp: Option<DateTime<Utc>>) -> Self {
        Self {
            patient_id: s.patient_id.clone(),
            meal_timestamp,
            age: s.age,
            sex: s.sex,
            ethnicity: s.ethnicity,
            a1c: s.a1c,
            carb_size: s.carb_size,
            total_bolus: s.total_bolus,
            delta_t: s.delta_t,
            mode: s.mode,
            total_basal: s.total_basal,
            premeal_slope: s.premeal_slope,
            premeal_bgl: s.premeal_bgl,
            outcome,
        }
    }
}

impl From<&FactualSample> for SampleInput {
    fn from(s: &FactualSample) -> Self {
        Self::from_sample(s, Some(s.outcome), Some(s.meal_timestamp))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub p_normoglycemia: f64,
    pub p_hyperglycemia: f64,
    pub predicted_class: Outcome,
}

impl Prediction {
    pub fn from_proba(p: [f64; 2]) -> Self {
        Self {
            p_normoglycemia: p[0],
            p_hyperglycemia: p[1],
            predicted_class: if p[1] > p[0] {
                Outcome::Hyperglycemia
            } else {
                Outcome::Normoglycemia
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CfRequest {
    pub sample: SampleInput,
    /// Patient weights keyed by lever name; missing levers get 1.
    #[serde(default)]
    pub w_user: BTreeMap<String, f64>,
    /// Physician weights keyed by lever name; missing levers get 1.
    #[serde(default)]
    pub w_physician: BTreeMap<String, f64>,
    #[serde(default)]
    pub gamma: Option<f64>,
    #[serde(default)]
    pub max_iter: Option<usize>,
    /// Step overrides keyed by lever name, in the lever's units.
    #[serde(default)]
    pub delta: BTreeMap<String, f64>,
    #[serde(default = "yes")]
    pub trajectory: bool,
    /// Answer 422 instead of an empty change when the sample already meets γ.
    #[serde(default)]
    pub reject_trivial: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundsScope {
    /// The patient's own history (at least five samples).
    Patient,
    Dataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeverSettings {
    pub name: String,
    pub min: f64,
    pub max: f64,
    pub step: f64,
    pub w_user: f64,
    pub w_physician: f64,
    /// `w_user + w_physician`, the preference part of the selection score.
    pub combined: f64,
}

impl LeverSettings {
    pub fn new(spec: &FeatureSpec, weights: &PreferenceWeights, i: usize) -> Self {
        Self {
            name: spec.name.clone(),
            min: spec.min,
            max: spec.max,
            step: spec.step,
            w_user: weights.user[i],
            w_physician: weights.physician[i],
            combined: weights.combined(i),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CfResponse {
    /// Counterfactual context, outcome set to the classifier's prediction.
    pub cf: SampleInput,
    pub factual_prediction: Prediction,
    pub cf_prediction: Prediction,
    pub converged: bool,
    pub stop_reason: StopReason,
    pub iterations: usize,
    pub gamma: f64,
    pub changed_features: Vec<String>,
    pub proximity: f64,
    /// Number of changed features.
    pub sparsity: usize,
    pub violations: usize,
    pub bounds: BoundsScope,
    pub levers: Vec<LeverSettings>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trajectory: Option<Vec<IterationTrace>>,
    /// Plain-language intervention; absent when the search did not converge.
    pub narrative: Option<String>,
    /// Wall time of the search; the only field that varies between
    /// identical requests.
    pub runtime_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemaResponse {
    pub schema_version: u32,
    pub features: Vec<FeatureSpec>,
    pub modifiable: Vec<String>,
    pub default_gamma: f64,
    pub default_max_iter: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassBalance {
    pub normoglycemia: usize,
    pub hyperglycemia: usize,
    pub hyperglycemic_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRange {
    pub name: String,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub n_samples: usize,
    pub n_patients: usize,
    pub class_balance: ClassBalance,
    pub features: Vec<FeatureRange>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub kind: String,
    /// SHA-256 of the model file.
    pub sha256: String,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    /// `ok` or `model_not_loaded`.
    pub status: String,
    pub version: String,
    pub model: Option<ModelInfo>,
    pub dataset_sha256: Option<String>,
}
