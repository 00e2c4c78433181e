use super::{DomainError, FactualSample, Feature, Nominal, N_FEATURES};
use super::{Ethnicity, Mode, Sex};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Continuous,
    Nominal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureEncoding {
    Identity,
    OneHot,
}

/// Where a feature's `[min, max]` box came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundsSource {
    /// Physical plausibility limits; the feature is not an intervention lever.
    Physical,
    /// Clinically fixed limits that are never personalized.
    Fixed,
    /// Placeholder limits waiting for a patient's history.
    PerPatient,
    /// Observed limits from a patient's history (or the whole cohort).
    Observed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    pub kind: FeatureKind,
    pub units: String,
    pub modifiable: bool,
    pub min: f64,
    pub max: f64,
    /// Perturbation step in the feature's own units; zero for fixed features.
    pub step: f64,
    pub encoding: FeatureEncoding,
    /// Level labels for nominal features, empty otherwise.
    #[serde(default)]
    pub levels: Vec<String>,
    pub bounds: BoundsSource,
}

impl FeatureSpec {
    pub fn continuous(name: &str, units: &str, min: f64, max: f64) -> Self {
        Self {
            name: name.to_string(),
            kind: FeatureKind::Continuous,
            units: units.to_string(),
            modifiable: false,
            min,
            max,
            step: 0.0,
            encoding: FeatureEncoding::Identity,
            levels: Vec::new(),
            bounds: BoundsSource::Physical,
        }
    }

    /// Marks the feature as an intervention lever with step `step`.
    pub fn modifiable(mut self, step: f64, bounds: BoundsSource) -> Self {
        self.modifiable = true;
        self.step = step;
        self.bounds = bounds;
        self
    }

    pub fn nominal(name: &str, levels: &[&str]) -> Self {
        Self {
            name: name.to_string(),
            kind: FeatureKind::Nominal,
            units: String::new(),
            modifiable: false,
            min: 0.0,
            max: (levels.len().max(1) - 1) as f64,
            step: 0.0,
            encoding: FeatureEncoding::OneHot,
            levels: levels.iter().map(|l| l.to_string()).collect(),
            bounds: BoundsSource::Physical,
        }
    }

    pub fn is_nominal(&self) -> bool {
        self.kind == FeatureKind::Nominal
    }

    pub fn range(&self) -> f64 {
        self.max - self.min
    }
}

/// Per-feature metadata for an ordered feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub features: Vec<FeatureSpec>,
}

/// The eleven-feature meal schema with the four behavioral levers.
///
/// Carb size, total bolus and Δt carry wide placeholder bounds until
/// [`FeatureSchema::personalize_bounds`] narrows them to a patient's own
/// history. Pre-meal BGL is always boxed to [100, 170] mg/dL.
pub fn default_schema() -> FeatureSchema {
    let spec = |f: Feature| -> FeatureSpec {
        match f {
            Feature::Age => FeatureSpec::continuous(f.name(), f.units(), 18.0, 100.0),
            Feature::Sex => FeatureSpec::nominal(f.name(), Sex::LEVELS),
            Feature::Ethnicity => FeatureSpec::nominal(f.name(), Ethnicity::LEVELS),
            Feature::A1c => FeatureSpec::continuous(f.name(), f.units(), 4.0, 14.0),
            Feature::CarbSize => FeatureSpec::continuous(f.name(), f.units(), 0.0, 300.0)
                .modifiable(5.0, BoundsSource::PerPatient),
            Feature::TotalBolus => FeatureSpec::continuous(f.name(), f.units(), 0.0, 50.0)
                .modifiable(0.5, BoundsSource::PerPatient),
            Feature::DeltaT => FeatureSpec::continuous(f.name(), f.units(), -180.0, 180.0)
                .modifiable(5.0, BoundsSource::PerPatient),
            Feature::Mode => FeatureSpec::nominal(f.name(), Mode::LEVELS),
            Feature::TotalBasal => FeatureSpec::continuous(f.name(), f.units(), 0.0, 30.0),
            Feature::PremealSlope => FeatureSpec::continuous(f.name(), f.units(), -100.0, 100.0),
            Feature::PremealBgl => FeatureSpec::continuous(f.name(), f.units(), 100.0, 170.0)
                .modifiable(10.0, BoundsSource::Fixed),
        }
    };
    FeatureSchema {
        features: Feature::ALL.into_iter().map(spec).collect(),
    }
}

/// Fewest samples a patient needs before their bounds can be personalized.
pub const MIN_HISTORY: usize = 5;

impl FeatureSchema {
    pub fn new(features: Vec<FeatureSpec>) -> Result<Self, DomainError> {
        let schema = Self { features };
        schema.validate()?;
        Ok(schema)
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.features.iter().position(|f| f.name == name)
    }

    pub fn modifiable_indices(&self) -> Vec<usize> {
        self.features
            .iter()
            .enumerate()
            .filter(|(_, f)| f.modifiable)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn is_modifiable(&self, i: usize) -> bool {
        self.features.get(i).is_some_and(|f| f.modifiable)
    }

    pub fn kinds(&self) -> Vec<FeatureKind> {
        self.features.iter().map(|f| f.kind).collect()
    }

    pub fn steps(&self) -> Vec<f64> {
        self.features.iter().map(|f| f.step).collect()
    }

    pub fn validate(&self) -> Result<(), DomainError> {
        for f in &self.features {
            let bad = |msg: &str| Err(DomainError::InvalidSchema(format!("{}: {msg}", f.name)));
            match f.kind {
                FeatureKind::Continuous => {
                    let ok = if f.bounds == BoundsSource::Observed {
                        f.min <= f.max
                    } else {
                        f.min < f.max
                    };
                    if !ok || !f.min.is_finite() || !f.max.is_finite() {
                        return bad("min must be below max");
                    }
                }
                FeatureKind::Nominal => {
                    if f.modifiable {
                        return bad("nominal features cannot be modifiable");
                    }
                    if f.levels.is_empty() {
                        return bad("nominal feature without levels");
                    }
                }
            }
            if f.modifiable && !(f.step > 0.0 && f.step.is_finite()) {
                return bad("modifiable features need a positive step");
            }
        }
        Ok(())
    }

    /// Checks a raw vector's shape: right length, finite values, nominal
    /// entries that name an existing level.
    pub fn validate_vector(&self, x: &[f64]) -> Result<(), DomainError> {
        if x.len() != self.len() {
            return Err(DomainError::SchemaMismatch(format!(
                "expected {} features, got {}",
                self.len(),
                x.len()
            )));
        }
        for (f, &v) in self.features.iter().zip(x) {
            if !v.is_finite() {
                return Err(DomainError::SchemaMismatch(format!("{} is not finite", f.name)));
            }
            if f.is_nominal() && (v.fract() != 0.0 || v < 0.0 || v as usize >= f.levels.len()) {
                return Err(DomainError::SchemaMismatch(format!(
                    "{} has no level {v}",
                    f.name
                )));
            }
        }
        Ok(())
    }

    /// Narrows the per-patient levers to the observed range in `history` for
    /// `patient_id`. Fixed bounds (pre-meal BGL) are left alone.
    pub fn personalize_bounds(
        &self,
        history: &[FactualSample],
        patient_id: &str,
    ) -> Result<FeatureSchema, DomainError> {
        let own: Vec<&FactualSample> = history
            .iter()
            .filter(|s| s.patient_id == patient_id)
            .collect();
        if own.is_empty() {
            return Err(DomainError::UnknownPatient(patient_id.to_string()));
        }
        if own.len() < MIN_HISTORY {
            return Err(DomainError::InsufficientHistory {
                patient_id: patient_id.to_string(),
                found: own.len(),
                required: MIN_HISTORY,
            });
        }
        Ok(self.with_observed_bounds(own))
    }

    /// Replaces every per-patient placeholder box with the range observed
    /// across `samples`.
    pub fn with_observed_bounds<'a>(
        &self,
        samples: impl IntoIterator<Item = &'a FactualSample>,
    ) -> FeatureSchema {
        let mut lo = [f64::INFINITY; N_FEATURES];
        let mut hi = [f64::NEG_INFINITY; N_FEATURES];
        let mut any = false;
        for s in samples {
            any = true;
            for (j, v) in s.features().into_iter().enumerate() {
                lo[j] = lo[j].min(v);
                hi[j] = hi[j].max(v);
            }
        }
        let mut out = self.clone();
        if !any {
            return out;
        }
        for (j, f) in out.features.iter_mut().enumerate() {
            if j < N_FEATURES && matches!(f.bounds, BoundsSource::PerPatient | BoundsSource::Observed)
            {
                f.min = lo[j];
                f.max = hi[j];
                f.bounds = BoundsSource::Observed;
            }
        }
        out
    }

    /// Sets every lever's step to `fraction` of its current range.
    pub fn with_step_fraction(&self, fraction: f64) -> FeatureSchema {
        let mut out = self.clone();
        for f in out.features.iter_mut().filter(|f| f.modifiable) {
            f.step = fraction * f.range();
        }
        out
    }

    /// Overrides lever steps by feature name.
    pub fn with_steps(&self, steps: &BTreeMap<String, f64>) -> Result<FeatureSchema, DomainError> {
        let mut out = self.clone();
        for (name, &step) in steps {
            let i = out
                .index_of(name)
                .ok_or_else(|| DomainError::SchemaMismatch(format!("unknown feature {name:?}")))?;
            if !out.features[i].modifiable {
                return Err(DomainError::SchemaMismatch(format!(
                    "{name} is not modifiable"
                )));
            }
            out.features[i].step = step;
        }
        out.validate()?;
        Ok(out)
    }

    /// Copies the lever boxes of `other` (same feature layout) into `self`.
    pub fn with_lever_bounds_from(&self, other: &FeatureSchema) -> FeatureSchema {
        let mut out = self.clone();
        for (f, g) in out.features.iter_mut().zip(&other.features) {
            if f.modifiable {
                f.min = g.min;
                f.max = g.max;
                f.bounds = g.bounds;
            }
        }
        out
    }
}

/// Stakeholder preference weights, one entry per feature. Higher weight makes
/// a lever more likely to be chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceWeights {
    pub user: Vec<f64>,
    pub physician: Vec<f64>,
}

impl PreferenceWeights {
    pub fn new(user: Vec<f64>, physician: Vec<f64>) -> Result<Self, DomainError> {
        if user.len() != physician.len() {
            return Err(DomainError::InvalidWeights(
                "user and physician weights differ in length".into(),
            ));
        }
        if let Some(w) = user.iter().chain(&physician).find(|w| !(0.0..=1.0).contains(*w)) {
            return Err(DomainError::InvalidWeights(format!("{w} is outside [0, 1]")));
        }
        Ok(Self { user, physician })
    }

    pub fn uniform(len: usize, value: f64) -> Self {
        Self {
            user: vec![value; len],
            physician: vec![value; len],
        }
    }

    /// Builds weights from per-feature maps keyed by feature name. Features
    /// missing from a map get `default`.
    pub fn from_named(
        schema: &FeatureSchema,
        user: &BTreeMap<String, f64>,
        physician: &BTreeMap<String, f64>,
        default: f64,
    ) -> Result<Self, DomainError> {
        let resolve = |map: &BTreeMap<String, f64>| -> Result<Vec<f64>, DomainError> {
            let mut out = vec![default; schema.len()];
            for (name, &w) in map {
                let i = schema.index_of(name).ok_or_else(|| {
                    DomainError::InvalidWeights(format!("unknown feature {name:?}"))
                })?;
                if !schema.features[i].modifiable {
                    return Err(DomainError::InvalidWeights(format!(
                        "{name} is not modifiable"
                    )));
                }
                out[i] = w;
            }
            Ok(out)
        };
        Self::new(resolve(user)?, resolve(physician)?)
    }

    pub fn len(&self) -> usize {
        self.user.len()
    }

    pub fn is_empty(&self) -> bool {
        self.user.is_empty()
    }

    /// `w_p[i] + w_u[i]`.
    pub fn combined(&self, i: usize) -> f64 {
        self.user[i] + self.physician[i]
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            user: self.user.iter().map(|w| w * factor).collect(),
            physician: self.physician.iter().map(|w| w * factor).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::fixtures::row_one;
    use super::*;

    fn schema() -> FeatureSchema {
        default_schema()
    }

    #[test]
    fn default_schema_levers_and_steps() {
        let s = schema();
        s.validate().unwrap();
        let names: Vec<_> = s
            .modifiable_indices()
            .into_iter()
            .map(|i| s.features[i].name.clone())
            .collect();
        assert_eq!(names, ["carb_size", "total_bolus", "delta_t", "premeal_bgl"]);
        let step = |f: Feature| s.features[f.index()].step;
        assert_eq!(step(Feature::CarbSize), 5.0);
        assert_eq!(step(Feature::TotalBolus), 0.5);
        assert_eq!(step(Feature::DeltaT), 5.0);
        assert_eq!(step(Feature::PremealBgl), 10.0);
        let bgl = &s.features[Feature::PremealBgl.index()];
        assert_eq!((bgl.min, bgl.max), (100.0, 170.0));
        assert!(s.features.iter().filter(|f| f.is_nominal()).all(|f| !f.modifiable));
    }

    fn history(carbs: &[f64]) -> Vec<FactualSample> {
        let mut base = row_one();
        base.patient_id = "p7".into();
        let mut out: Vec<_> = carbs
            .iter()
            .enumerate()
            .map(|(k, &c)| {
                let mut s = base.clone();
                s.carb_size = c;
                s.total_bolus = 1.0 + k as f64;
                s.delta_t = -10.0 + 5.0 * k as f64;
                s
            })
            .collect();
        let mut other = row_one();
        other.carb_size = 500.0;
        out.push(other);
        out
    }

    #[test]
    fn personalize_uses_observed_min_max() {
        let h = history(&[41.0, 18.0, 60.0, 30.0, 25.0]);
        let p = schema().personalize_bounds(&h, "p7").unwrap();
        let carb = &p.features[Feature::CarbSize.index()];
        assert_eq!((carb.min, carb.max), (18.0, 60.0));
        let bolus = &p.features[Feature::TotalBolus.index()];
        assert_eq!((bolus.min, bolus.max), (1.0, 5.0));
        let dt = &p.features[Feature::DeltaT.index()];
        assert_eq!((dt.min, dt.max), (-10.0, 10.0));
        let bgl = &p.features[Feature::PremealBgl.index()];
        assert_eq!((bgl.min, bgl.max), (100.0, 170.0));
        p.validate().unwrap();
    }

    #[test]
    fn personalize_error_contracts() {
        let h = history(&[41.0, 18.0, 60.0]);
        assert!(matches!(
            schema().personalize_bounds(&h, "nobody"),
            Err(DomainError::UnknownPatient(_))
        ));
        assert!(matches!(
            schema().personalize_bounds(&h, "p7"),
            Err(DomainError::InsufficientHistory { found: 3, .. })
        ));
    }

    #[test]
    fn step_fraction_scales_with_range() {
        let s = schema().with_step_fraction(0.1);
        assert!((s.features[Feature::PremealBgl.index()].step - 7.0).abs() < 1e-12);
        assert_eq!(s.features[Feature::Age.index()].step, 0.0);
    }

    #[test]
    fn weights_from_names_reject_fixed_features() {
        let s = schema();
        let mut user = BTreeMap::new();
        user.insert("age".to_string(), 0.5);
        assert!(PreferenceWeights::from_named(&s, &user, &BTreeMap::new(), 1.0).is_err());
        let mut user = BTreeMap::new();
        user.insert("carb_size".to_string(), 0.25);
        let w = PreferenceWeights::from_named(&s, &user, &BTreeMap::new(), 1.0).unwrap();
        assert_eq!(w.user[Feature::CarbSize.index()], 0.25);
        assert_eq!(w.combined(Feature::CarbSize.index()), 1.25);
        assert!(PreferenceWeights::new(vec![1.5], vec![0.0]).is_err());
    }

    #[test]
    fn vector_validation_checks_levels() {
        let s = schema();
        let mut v = row_one().features();
        s.validate_vector(&v).unwrap();
        v[Feature::Ethnicity.index()] = 3.0;
        assert!(s.validate_vector(&v).is_err());
        assert!(s.validate_vector(&v[..4]).is_err());
    }
}
