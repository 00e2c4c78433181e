//! Shared domain types: patients, meal samples, the feature schema and the
//! raw/encoded feature transforms.
//!
//! Every sample is viewed two ways. The *raw* feature vector keeps human
//! units (grams, insulin units, minutes, mg/dL) and stores nominal features
//! as their level index; this is what the counterfactual engine walks over.
//! The *encoded* vector is what a trained network consumes: z-scored
//! continuous features and one-hot nominal groups.

mod encoding;
mod io;
mod schema;

pub use encoding::{EncodedSample, Encoder};
pub use io::{read_profiles, read_samples, write_profiles, write_samples, SAMPLE_CSV_HEADER};
pub use schema::{
    default_schema, BoundsSource, FeatureEncoding, FeatureKind, FeatureSchema, FeatureSpec,
    PreferenceWeights,
};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use std::fmt;

/// Number of features in a processed meal sample.
pub const N_FEATURES: usize = 11;

/// Raw feature vector for one meal sample, ordered as [`Feature::ALL`].
pub type FeatureVector = Vec<f64>;

#[derive(Debug, thiserror::Error)]
pub enum DomainError {
    #[error("invalid sample: {}", join_fields(.0))]
    InvalidSample(Vec<FieldError>),
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("unknown patient {0:?}")]
    UnknownPatient(String),
    #[error("patient {patient_id:?} has {found} samples, at least {required} required")]
    InsufficientHistory {
        patient_id: String,
        found: usize,
        required: usize,
    },
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
    #[error("invalid preference weights: {0}")]
    InvalidWeights(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A single field-level validation failure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl FieldError {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            message: message.into(),
        }
    }
}

fn join_fields(errors: &[FieldError]) -> String {
    errors
        .iter()
        .map(|e| format!("{}: {}", e.field, e.message))
        .collect::<Vec<_>>()
        .join("; ")
}

/// The eleven processed features of a meal event, in canonical order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feature {
    Age,
    Sex,
    Ethnicity,
    A1c,
    CarbSize,
    TotalBolus,
    DeltaT,
    Mode,
    TotalBasal,
    PremealSlope,
    PremealBgl,
}

impl Feature {
    pub const ALL: [Feature; N_FEATURES] = [
        Feature::Age,
        Feature::Sex,
        Feature::Ethnicity,
        Feature::A1c,
        Feature::CarbSize,
        Feature::TotalBolus,
        Feature::DeltaT,
        Feature::Mode,
        Feature::TotalBasal,
        Feature::PremealSlope,
        Feature::PremealBgl,
    ];

    /// The behavioral levers a patient can act on.
    pub const MODIFIABLE: [Feature; 4] = [
        Feature::CarbSize,
        Feature::TotalBolus,
        Feature::DeltaT,
        Feature::PremealBgl,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Column name used in CSV files and JSON bodies.
    pub fn name(self) -> &'static str {
        match self {
            Feature::Age => "age",
            Feature::Sex => "sex",
            Feature::Ethnicity => "ethnicity",
            Feature::A1c => "a1c",
            Feature::CarbSize => "carb_size",
            Feature::TotalBolus => "total_bolus",
            Feature::DeltaT => "delta_t",
            Feature::Mode => "mode",
            Feature::TotalBasal => "total_basal",
            Feature::PremealSlope => "premeal_slope",
            Feature::PremealBgl => "premeal_bgl",
        }
    }

    pub fn from_name(name: &str) -> Option<Feature> {
        Feature::ALL.into_iter().find(|f| f.name() == name)
    }

    pub fn units(self) -> &'static str {
        match self {
            Feature::Age => "years",
            Feature::A1c => "%",
            Feature::CarbSize => "g",
            Feature::TotalBolus | Feature::TotalBasal => "units",
            Feature::DeltaT => "minutes",
            Feature::PremealSlope => "mg/dL per 5 min",
            Feature::PremealBgl => "mg/dL",
            Feature::Sex | Feature::Ethnicity | Feature::Mode => "",
        }
    }

    pub fn is_nominal(self) -> bool {
        matches!(self, Feature::Sex | Feature::Ethnicity | Feature::Mode)
    }
}

impl fmt::Display for Feature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Nominal feature with a fixed, ordered level set.
pub trait Nominal: Sized + Copy {
    const LEVELS: &'static [&'static str];

    fn level(self) -> usize;

    fn from_level(level: usize) -> Option<Self>;

    /// Reads a level index stored in a raw feature vector.
    fn from_raw(value: f64) -> Option<Self> {
        if value.fract() != 0.0 || value < 0.0 {
            return None;
        }
        Self::from_level(value as usize)
    }
}

macro_rules! nominal_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $label:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
        pub enum $name {
            $(#[serde(rename = $label)] $variant),+
        }

        impl Nominal for $name {
            const LEVELS: &'static [&'static str] = &[$($label),+];

            fn level(self) -> usize {
                self as usize
            }

            fn from_level(level: usize) -> Option<Self> {
                const VARIANTS: &[$name] = &[$($name::$variant),+];
                VARIANTS.get(level).copied()
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(Self::LEVELS[self.level()])
            }
        }

        impl std::str::FromStr for $name {
            type Err = DomainError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                Self::LEVELS
                    .iter()
                    .position(|l| *l == s)
                    .and_then(Self::from_level)
                    .ok_or_else(|| {
                        DomainError::SchemaMismatch(format!(
                            "unknown {} level {s:?}",
                            stringify!($name)
                        ))
                    })
            }
        }
    };
}

nominal_enum!(Sex { F => "F", M => "M" });
nominal_enum!(Ethnicity { White => "White", Hispanic => "Hispanic", Other => "Other" });
nominal_enum!(
    /// Insulin pump operating mode.
    Mode { Regular => "regular", Sleep => "sleep", Exercise => "exercise" }
);

/// Binary postprandial outcome. The class index doubles as the predictor
/// output index: normoglycemia is 0, hyperglycemia is 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Normoglycemia,
    Hyperglycemia,
}

impl Outcome {
    pub fn class_index(self) -> usize {
        match self {
            Outcome::Normoglycemia => 0,
            Outcome::Hyperglycemia => 1,
        }
    }

    pub fn from_class_index(index: usize) -> Option<Outcome> {
        match index {
            0 => Some(Outcome::Normoglycemia),
            1 => Some(Outcome::Hyperglycemia),
            _ => None,
        }
    }

    pub fn other(self) -> Outcome {
        match self {
            Outcome::Normoglycemia => Outcome::Hyperglycemia,
            Outcome::Hyperglycemia => Outcome::Normoglycemia,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::Normoglycemia => "normoglycemia",
            Outcome::Hyperglycemia => "hyperglycemia",
        }
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Static patient attributes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientProfile {
    pub patient_id: String,
    pub age: u32,
    pub sex: Sex,
    pub ethnicity: Ethnicity,
    pub a1c: f64,
    pub years_from_diagnosis: f64,
}

impl PatientProfile {
    pub fn validate(&self) -> Result<(), DomainError> {
        let mut errors = Vec::new();
        if !(18..=100).contains(&self.age) {
            errors.push(FieldError::new("age", "must be in [18, 100]"));
        }
        if !(4.0..=14.0).contains(&self.a1c) {
            errors.push(FieldError::new("a1c", "must be in [4.0, 14.0]"));
        }
        if !(self.years_from_diagnosis >= 0.0 && self.years_from_diagnosis <= self.age as f64) {
            errors.push(FieldError::new(
                "years_from_diagnosis",
                "must be in [0, age]",
            ));
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(DomainError::InvalidSample(errors))
        }
    }
}

/// One processed meal event: eleven features plus the observed outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactualSample {
    pub patient_id: String,
    pub meal_timestamp: DateTime<Utc>,
    pub age: u32,
    pub sex: Sex,
    pub ethnicity: Ethnicity,
    pub a1c: f64,
    /// grams
    pub carb_size: f64,
    /// insulin units
    pub total_bolus: f64,
    /// minutes from meal to food bolus; negative means the bolus came first
    pub delta_t: f64,
    pub mode: Mode,
    /// insulin units over the 90 minutes before the meal
    pub total_basal: f64,
    /// mg/dL per 5 minutes
    pub premeal_slope: f64,
    /// mg/dL
    pub premeal_bgl: f64,
    pub outcome: Outcome,
}

impl FactualSample {
    /// Raw feature vector in [`Feature::ALL`] order.
    pub fn features(&self) -> FeatureVector {
        vec![
            self.age as f64,
            self.sex.level() as f64,
            self.ethnicity.level() as f64,
            self.a1c,
            self.carb_size,
            self.total_bolus,
            self.delta_t,
            self.mode.level() as f64,
            self.total_basal,
            self.premeal_slope,
            self.premeal_bgl,
        ]
    }

    pub fn feature(&self, feature: Feature) -> f64 {
        self.features()[feature.index()]
    }

    /// Copy of this sample with its features replaced by `values`. Identity
    /// fields and the outcome are carried over unchanged.
    pub fn with_features(&self, values: &[f64]) -> Result<FactualSample, DomainError> {
        if values.len() != N_FEATURES {
            return Err(DomainError::SchemaMismatch(format!(
                "expected {N_FEATURES} features, got {}",
                values.len()
            )));
        }
        let nominal = |f: Feature| -> Result<usize, DomainError> {
            let v = values[f.index()];
            if v.fract() != 0.0 || v < 0.0 {
                return Err(DomainError::SchemaMismatch(format!(
                    "{f} level {v} is not an index"
                )));
            }
            Ok(v as usize)
        };
        let level_err = |f: Feature| DomainError::SchemaMismatch(format!("unknown {f} level"));
        let age = values[Feature::Age.index()];
        if age.fract() != 0.0 || age < 0.0 {
            return Err(DomainError::SchemaMismatch(format!(
                "age {age} is not a whole number of years"
            )));
        }
        Ok(FactualSample {
            patient_id: self.patient_id.clone(),
            meal_timestamp: self.meal_timestamp,
            age: age as u32,
            sex: Sex::from_level(nominal(Feature::Sex)?).ok_or_else(|| level_err(Feature::Sex))?,
            ethnicity: Ethnicity::from_level(nominal(Feature::Ethnicity)?)
                .ok_or_else(|| level_err(Feature::Ethnicity))?,
            a1c: values[Feature::A1c.index()],
            carb_size: values[Feature::CarbSize.index()],
            total_bolus: values[Feature::TotalBolus.index()],
            delta_t: values[Feature::DeltaT.index()],
            mode: Mode::from_level(nominal(Feature::Mode)?)
                .ok_or_else(|| level_err(Feature::Mode))?,
            total_basal: values[Feature::TotalBasal.index()],
            premeal_slope: values[Feature::PremealSlope.index()],
            premeal_bgl: values[Feature::PremealBgl.index()],
            outcome: self.outcome,
        })
    }

    /// Checks the physical invariants every processed sample must satisfy.
    pub fn validate(&self) -> Result<(), DomainError> {
        let mut errors = Vec::new();
        for f in Feature::ALL {
            if !self.feature(f).is_finite() {
                errors.push(FieldError::new(f.name(), "must be finite"));
            }
        }
        if !(18..=100).contains(&self.age) {
            errors.push(FieldError::new("age", "must be in [18, 100]"));
        }
        if !(4.0..=14.0).contains(&self.a1c) {
            errors.push(FieldError::new("a1c", "must be in [4.0, 14.0]"));
        }
        for (name, v) in [
            ("carb_size", self.carb_size),
            ("total_bolus", self.total_bolus),
            ("total_basal", self.total_basal),
        ] {
            if v < 0.0 {
                errors.push(FieldError::new(name, "must be non-negative"));
            }
        }
        if !(20.0..=500.0).contains(&self.premeal_bgl) {
            errors.push(FieldError::new("premeal_bgl", "must be in [20, 500] mg/dL"));
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(DomainError::InvalidSample(errors))
        }
    }
}

/// The two example rows of the processed-sample table, used by tests and
/// as request templates.
pub mod fixtures {
    use super::*;
    use chrono::TimeZone;

    /// First example row of the processed-sample table.
    pub fn row_one() -> FactualSample {
        FactualSample {
            patient_id: "p01".into(),
            meal_timestamp: Utc.with_ymd_and_hms(2024, 1, 10, 12, 0, 0).unwrap(),
            age: 61,
            sex: Sex::F,
            ethnicity: Ethnicity::White,
            a1c: 6.7,
            carb_size: 20.0,
            total_bolus: 7.57,
            delta_t: -5.0,
            mode: Mode::Regular,
            total_basal: 2.475,
            premeal_slope: 2.943,
            premeal_bgl: 129.0,
            outcome: Outcome::Normoglycemia,
        }
    }

    /// Second example row.
    pub fn row_two() -> FactualSample {
        FactualSample {
            patient_id: "p02".into(),
            meal_timestamp: Utc.with_ymd_and_hms(2024, 1, 11, 18, 30, 0).unwrap(),
            age: 32,
            sex: Sex::F,
            ethnicity: Ethnicity::Hispanic,
            a1c: 5.0,
            carb_size: 35.0,
            total_bolus: 5.83,
            delta_t: 15.0,
            mode: Mode::Regular,
            total_basal: 0.357,
            premeal_slope: 1.457,
            premeal_bgl: 134.0,
            outcome: Outcome::Hyperglycemia,
        }
    }
}
