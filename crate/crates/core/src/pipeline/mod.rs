//! Feature extraction from raw CGM and pump streams.
//!
//! Each food bolus becomes one meal event. The meal time is not logged by the
//! pump, so it is inferred from the postprandial peak: the peak is searched
//! in the two hours after the bolus and the meal is placed 72 minutes before
//! it. All other features hang off that inferred meal time.

mod io;

pub use io::{read_stream, read_stream_dir, write_stream, write_stream_dir};

use crate::domain::{DomainError, FactualSample, Mode, Outcome, PatientProfile};
use chrono::{DateTime, TimeDelta, Utc};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

pub const PEAK_WINDOW_MIN: i64 = 120;
pub const MEAL_TO_PEAK_MIN: i64 = 72;
pub const BASAL_WINDOW_MIN: i64 = 90;
pub const PREMEAL_WINDOW_MIN: i64 = 30;
pub const OUTCOME_WINDOW_MIN: i64 = 120;
/// Largest tolerated spacing between CGM readings inside a required window.
pub const MAX_GAP_MIN: i64 = 15;
/// A bolus with a carb entry this close is a food bolus.
pub const FOOD_BOLUS_CARB_TOLERANCE_MIN: i64 = 10;
pub const MIN_PREMEAL_READINGS: usize = 4;
/// mg/dL; strictly above means hyperglycemia.
pub const HYPERGLYCEMIA_THRESHOLD: f64 = 180.0;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("insufficient CGM coverage for the {window} window: {detail}")]
    InsufficientCoverage { window: &'static str, detail: String },
    #[error("no carb entry between {start} and {end}")]
    NoCarbEntry {
        start: DateTime<Utc>,
        end: DateTime<Utc>,
    },
    #[error("invalid stream for {patient_id}: {message}")]
    InvalidStream { patient_id: String, message: String },
    #[error("no profile for patient {0:?}")]
    MissingProfile(String),
    #[error("raw input line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn minutes(m: i64) -> TimeDelta {
    TimeDelta::minutes(m)
}

fn minutes_between(later: DateTime<Utc>, earlier: DateTime<Utc>) -> f64 {
    (later - earlier).num_milliseconds() as f64 / 60_000.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CgmReading {
    pub timestamp: DateTime<Utc>,
    /// mg/dL
    pub bgl: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BolusKind {
    Food,
    Correction,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bolus {
    pub timestamp: DateTime<Utc>,
    pub units: f64,
    pub kind: BolusKind,
}

/// Basal rate in units/hour, in effect until the next record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BasalRate {
    pub timestamp: DateTime<Utc>,
    pub rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CarbEntry {
    pub timestamp: DateTime<Utc>,
    pub grams: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModeChange {
    pub timestamp: DateTime<Utc>,
    pub mode: Mode,
}

/// Time-indexed CGM readings and pump events for one patient.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PatientStream {
    pub patient_id: String,
    pub cgm: Vec<CgmReading>,
    pub boluses: Vec<Bolus>,
    pub basals: Vec<BasalRate>,
    pub carbs: Vec<CarbEntry>,
    pub modes: Vec<ModeChange>,
}

fn strictly_ordered<T>(items: &[T], ts: impl Fn(&T) -> DateTime<Utc>) -> bool {
    items.windows(2).all(|w| ts(&w[0]) < ts(&w[1]))
}

impl PatientStream {
    pub fn new(patient_id: impl Into<String>) -> Self {
        Self {
            patient_id: patient_id.into(),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let fail = |message: &str| {
            Err(PipelineError::InvalidStream {
                patient_id: self.patient_id.clone(),
                message: message.to_string(),
            })
        };
        if !strictly_ordered(&self.cgm, |r| r.timestamp)
            || !strictly_ordered(&self.boluses, |b| b.timestamp)
            || !strictly_ordered(&self.basals, |b| b.timestamp)
            || !strictly_ordered(&self.carbs, |c| c.timestamp)
            || !strictly_ordered(&self.modes, |m| m.timestamp)
        {
            return fail("series must be strictly time-ordered");
        }
        if self.cgm.iter().any(|r| !(20.0..=500.0).contains(&r.bgl)) {
            return fail("CGM reading outside [20, 500] mg/dL");
        }
        if self.boluses.iter().any(|b| !(b.units >= 0.0)) {
            return fail("negative bolus");
        }
        if self.basals.iter().any(|b| !(b.rate >= 0.0)) {
            return fail("negative basal rate");
        }
        if self.carbs.iter().any(|c| !(c.grams >= 0.0)) {
            return fail("negative carb entry");
        }
        Ok(())
    }

    /// CGM readings with timestamps in the closed window `[start, end]`.
    pub fn cgm_between(&self, start: DateTime<Utc>, end: DateTime<Utc>) -> &[CgmReading] {
        let lo = self.cgm.partition_point(|r| r.timestamp < start);
        let hi = self.cgm.partition_point(|r| r.timestamp <= end);
        &self.cgm[lo..hi.max(lo)]
    }

    /// Device mode in effect at `t`; regular before the first mode record.
    pub fn mode_at(&self, t: DateTime<Utc>) -> Mode {
        let k = self.modes.partition_point(|m| m.timestamp <= t);
        if k == 0 {
            Mode::Regular
        } else {
            self.modes[k - 1].mode
        }
    }

    /// Timestamps of boluses that have a carb entry within ±10 minutes.
    pub fn food_bolus_times(&self) -> Vec<DateTime<Utc>> {
        let tol = minutes(FOOD_BOLUS_CARB_TOLERANCE_MIN);
        self.boluses
            .iter()
            .filter(|b| {
                let lo = self.carbs.partition_point(|c| c.timestamp < b.timestamp - tol);
                self.carbs
                    .get(lo)
                    .is_some_and(|c| c.timestamp <= b.timestamp + tol)
            })
            .map(|b| b.timestamp)
            .collect()
    }
}

/// Returns the readings in `[start, end]` after checking that no two
/// consecutive points (window edges included) are more than 15 minutes apart.
fn covered_readings<'a>(
    stream: &'a PatientStream,
    start: DateTime<Utc>,
    end: DateTime<Utc>,
    window: &'static str,
) -> Result<&'a [CgmReading], PipelineError> {
    let readings = stream.cgm_between(start, end);
    if readings.is_empty() {
        return Err(PipelineError::InsufficientCoverage {
            window,
            detail: "no readings".into(),
        });
    }
    let max_gap = minutes(MAX_GAP_MIN);
    let mut prev = start;
    for t in readings.iter().map(|r| r.timestamp).chain(std::iter::once(end)) {
        if t - prev > max_gap {
            return Err(PipelineError::InsufficientCoverage {
                window,
                detail: format!("{} minute gap ending at {t}", (t - prev).num_minutes()),
            });
        }
        prev = t;
    }
    Ok(readings)
}

/// Meal timing landmarks for one food bolus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MealWindow {
    pub t_fb: DateTime<Utc>,
    pub t_meal: DateTime<Utc>,
    pub t_max: DateTime<Utc>,
    pub bgl_max: f64,
}

impl MealWindow {
    /// Start of the bolus/carb accounting window, `min(t_meal, t_fb)`.
    pub fn accounting_start(&self) -> DateTime<Utc> {
        self.t_meal.min(self.t_fb)
    }
}

/// Highest CGM value in `[t_fb, t_fb + 120 min]` and its (earliest) time.
pub fn locate_postprandial_peak(
    stream: &PatientStream,
    t_fb: DateTime<Utc>,
) -> Result<(f64, DateTime<Utc>), PipelineError> {
    peak_between(stream, t_fb, t_fb + minutes(PEAK_WINDOW_MIN))
}

fn peak_between(
    stream: &PatientStream,
    start: DateTime<Utc>,
    end: DateTime<Utc>,
) -> Result<(f64, DateTime<Utc>), PipelineError> {
    let readings = covered_readings(stream, start, end, "postprandial peak")?;
    let mut best = readings[0];
    for r in &readings[1..] {
        if r.bgl > best.bgl {
            best = *r;
        }
    }
    Ok((best.bgl, best.timestamp))
}

/// `t_meal = t_max − 72 min`; Δt = t_fb − t_meal in minutes.
pub fn infer_meal_and_delta_t(t_fb: DateTime<Utc>, t_max: DateTime<Utc>) -> (DateTime<Utc>, f64) {
    let t_meal = t_max - minutes(MEAL_TO_PEAK_MIN);
    (t_meal, minutes_between(t_fb, t_meal))
}

/// Units of every bolus, food or correction, in `[min(t_meal, t_fb), t_max]`.
pub fn total_bolus(
    stream: &PatientStream,
    t_meal: DateTime<Utc>,
    t_fb: DateTime<Utc>,
    t_max: DateTime<Utc>,
) -> f64 {
    let start = t_meal.min(t_fb);
    stream
        .boluses
        .iter()
        .filter(|b| b.timestamp >= start && b.timestamp <= t_max)
        .map(|b| b.units)
        .sum()
}

/// Basal insulin delivered over `[t_meal − 90 min, t_meal]`, integrating the
/// step-function rate schedule.
pub fn total_basal(stream: &PatientStream, t_meal: DateTime<Utc>) -> f64 {
    let start = t_meal - minutes(BASAL_WINDOW_MIN);
    let first_after = stream.basals.partition_point(|b| b.timestamp <= start);
    let mut rate = if first_after == 0 {
        0.0
    } else {
        stream.basals[first_after - 1].rate
    };
    let mut at = start;
    let mut units = 0.0;
    for b in stream.basals[first_after..]
        .iter()
        .take_while(|b| b.timestamp < t_meal)
    {
        units += rate * minutes_between(b.timestamp, at) / 60.0;
        rate = b.rate;
        at = b.timestamp;
    }
    units + rate * minutes_between(t_meal, at) / 60.0
}

/// Reading at (or up to 5 minutes before) the meal, and the least-squares
/// trend over the preceding 30 minutes expressed per 5 minutes.
pub fn premeal_bgl_and_slope(
    stream: &PatientStream,
    t_meal: DateTime<Utc>,
) -> Result<(f64, f64), PipelineError> {
    let readings = stream.cgm_between(t_meal - minutes(PREMEAL_WINDOW_MIN), t_meal);
    if readings.len() < MIN_PREMEAL_READINGS {
        return Err(PipelineError::InsufficientCoverage {
            window: "pre-meal",
            detail: format!("{} readings in the 30 minutes before the meal", readings.len()),
        });
    }
    let last = readings[readings.len() - 1];
    if t_meal - last.timestamp > minutes(5) {
        return Err(PipelineError::InsufficientCoverage {
            window: "pre-meal",
            detail: "no reading within 5 minutes before the meal".into(),
        });
    }
    let xs: Vec<f64> = readings
        .iter()
        .map(|r| minutes_between(r.timestamp, t_meal))
        .collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = readings.iter().map(|r| r.bgl).sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (x, r) in xs.iter().zip(readings) {
        sxy += (x - mx) * (r.bgl - my);
        sxx += (x - mx) * (x - mx);
    }
    let per_minute = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    Ok((last.bgl, per_minute * 5.0))
}

/// Largest carb entry in `[min(t_meal, t_fb), t_max]`; the rest are treated
/// as secondary entries and discarded.
pub fn filter_carbs(
    stream: &PatientStream,
    t_meal: DateTime<Utc>,
    t_fb: DateTime<Utc>,
    t_max: DateTime<Utc>,
) -> Result<f64, PipelineError> {
    let start = t_meal.min(t_fb);
    stream
        .carbs
        .iter()
        .filter(|c| c.timestamp >= start && c.timestamp <= t_max)
        .map(|c| c.grams)
        .fold(None, |acc: Option<f64>, g| Some(acc.map_or(g, |a| a.max(g))))
        .ok_or(PipelineError::NoCarbEntry { start, end: t_max })
}

/// Hyperglycemia iff any reading in the two hours after the meal exceeds
/// 180 mg/dL.
pub fn label_outcome(stream: &PatientStream, t_meal: DateTime<Utc>) -> Result<Outcome, PipelineError> {
    let readings = covered_readings(
        stream,
        t_meal,
        t_meal + minutes(OUTCOME_WINDOW_MIN),
        "outcome",
    )?;
    let peak = readings.iter().map(|r| r.bgl).fold(f64::NEG_INFINITY, f64::max);
    Ok(if peak > HYPERGLYCEMIA_THRESHOLD {
        Outcome::Hyperglycemia
    } else {
        Outcome::Normoglycemia
    })
}

/// A food bolus that did not produce a sample, and why.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkipRecord {
    pub patient_id: String,
    pub bolus_timestamp: DateTime<Utc>,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetBuild {
    pub samples: Vec<FactualSample>,
    pub skipped: Vec<SkipRecord>,
}

impl DatasetBuild {
    pub fn hyperglycemic_fraction(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        let h = self
            .samples
            .iter()
            .filter(|s| s.outcome == Outcome::Hyperglycemia)
            .count();
        h as f64 / self.samples.len() as f64
    }
}

/// Meal landmarks for the food bolus at `t_fb`. When another food bolus
/// follows within two hours, the peak search stops at it.
pub fn meal_window(
    stream: &PatientStream,
    t_fb: DateTime<Utc>,
    next_food_bolus: Option<DateTime<Utc>>,
) -> Result<MealWindow, PipelineError> {
    let mut end = t_fb + minutes(PEAK_WINDOW_MIN);
    if let Some(next) = next_food_bolus.filter(|&n| n > t_fb && n < end) {
        end = next;
    }
    let (bgl_max, t_max) = peak_between(stream, t_fb, end)?;
    let (t_meal, _) = infer_meal_and_delta_t(t_fb, t_max);
    Ok(MealWindow {
        t_fb,
        t_meal,
        t_max,
        bgl_max,
    })
}

/// Extracts the processed sample for one food bolus.
pub fn extract_sample(
    stream: &PatientStream,
    profile: &PatientProfile,
    t_fb: DateTime<Utc>,
    next_food_bolus: Option<DateTime<Utc>>,
) -> Result<FactualSample, PipelineError> {
    let w = meal_window(stream, t_fb, next_food_bolus)?;
    let (_, delta_t) = infer_meal_and_delta_t(w.t_fb, w.t_max);
    let (premeal_bgl, premeal_slope) = premeal_bgl_and_slope(stream, w.t_meal)?;
    let carb_size = filter_carbs(stream, w.t_meal, w.t_fb, w.t_max)?;
    let outcome = label_outcome(stream, w.t_meal)?;
    let sample = FactualSample {
        patient_id: stream.patient_id.clone(),
        meal_timestamp: w.t_meal,
        age: profile.age,
        sex: profile.sex,
        ethnicity: profile.ethnicity,
        a1c: profile.a1c,
        carb_size,
        total_bolus: total_bolus(stream, w.t_meal, w.t_fb, w.t_max),
        delta_t,
        mode: stream.mode_at(w.t_meal),
        total_basal: total_basal(stream, w.t_meal),
        premeal_slope,
        premeal_bgl,
        outcome,
    };
    sample.validate()?;
    Ok(sample)
}

/// One sample per usable food bolus across all streams, sorted by
/// `(patient_id, meal_timestamp)`. Events that fail a coverage or validity
/// rule are reported in `skipped` rather than aborting the build.
pub fn build_dataset(
    streams: &[PatientStream],
    profiles: &[PatientProfile],
) -> Result<DatasetBuild, PipelineError> {
    let by_id: HashMap<&str, &PatientProfile> =
        profiles.iter().map(|p| (p.patient_id.as_str(), p)).collect();
    let mut build = DatasetBuild::default();
    for stream in streams {
        let profile = by_id
            .get(stream.patient_id.as_str())
            .ok_or_else(|| PipelineError::MissingProfile(stream.patient_id.clone()))?;
        stream.validate()?;
        let mut times = stream.food_bolus_times();
        times.dedup();
        for (k, &t_fb) in times.iter().enumerate() {
            match extract_sample(stream, profile, t_fb, times.get(k + 1).copied()) {
                Ok(s) => build.samples.push(s),
                Err(e) => build.skipped.push(SkipRecord {
                    patient_id: stream.patient_id.clone(),
                    bolus_timestamp: t_fb,
                    reason: e.to_string(),
                }),
            }
        }
    }
    build.samples.sort_by(|a, b| {
        (a.patient_id.as_str(), a.meal_timestamp).cmp(&(b.patient_id.as_str(), b.meal_timestamp))
    });
    tracing::debug!(
        samples = build.samples.len(),
        skipped = build.skipped.len(),
        "dataset built"
    );
    Ok(build)
}

#[cfg(test)]
mod tests;
