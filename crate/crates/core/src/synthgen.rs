//! Synthetic cohort generator.
//!
//! Produces raw CGM/pump streams with the same shape as pump exports so the
//! whole pipeline can run without clinical data. Glucose is modeled as a
//! mean-reverting baseline plus superposed meal and insulin excursions:
//!
//! ```text
//! BGL(t) = G0(t) + Σ A_carb·carb·absorb(t − meal) − Σ A_ins·units·act(t − bolus)
//!          + basal/mode drift + sensor noise
//! ```
//!
//! `absorb` and `act` are gamma-shaped curves normalized to a unit peak.
//! Insulin acts more slowly than carbohydrate appears, so a bolus given
//! earlier blunts the postprandial peak; that is the lever the
//! counterfactual search is expected to find.

use crate::domain::{Ethnicity, Mode, PatientProfile, Sex};
use crate::pipeline::{BasalRate, Bolus, BolusKind, CarbEntry, CgmReading, ModeChange, PatientStream};
use chrono::{DateTime, TimeDelta, TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

const CARB_PEAK_MIN: f64 = 80.0;
const CARB_SHAPE: f64 = 3.0;
const INSULIN_PEAK_MIN: f64 = 110.0;
const INSULIN_SHAPE: f64 = 3.0;
/// Effects older than this are dropped from the superposition.
const KERNEL_SUPPORT_MIN: f64 = 420.0;
const CGM_CADENCE_MIN: i64 = 5;

/// Gamma-shaped curve with value 1 at `peak` and 0 for `s <= 0`.
fn gamma_kernel(s: f64, peak: f64, shape: f64) -> f64 {
    if s <= 0.0 {
        return 0.0;
    }
    let u = s / peak;
    (u.powf(shape) * (shape * (1.0 - u)).exp()).max(0.0)
}

/// Relative glucose appearance `s` minutes after eating.
pub fn carb_absorption(s: f64) -> f64 {
    gamma_kernel(s, CARB_PEAK_MIN, CARB_SHAPE)
}

/// Relative insulin action `s` minutes after a bolus.
pub fn insulin_action(s: f64) -> f64 {
    gamma_kernel(s, INSULIN_PEAK_MIN, INSULIN_SHAPE)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_patients: usize,
    pub days_per_patient: f64,
    pub seed: u64,
    /// Expected main meals per day.
    pub meal_rate: f64,
    /// CGM sensor noise, mg/dL.
    pub noise_sd: f64,
    /// First timestamp of every stream.
    pub start: DateTime<Utc>,
    pub age_mean: f64,
    pub age_sd: f64,
    pub female_fraction: f64,
    pub hispanic_fraction: f64,
    pub a1c_mean: f64,
    pub a1c_sd: f64,
    pub a1c_min: f64,
    pub a1c_max: f64,
    pub yfd_mean: f64,
    pub yfd_sd: f64,
    /// Share of meals where the bolus is taken during or after eating.
    pub late_bolus_fraction: f64,
    /// Probability per day of a CGM dropout segment.
    pub dropout_rate: f64,
    /// Log-scale spread of the meal dose around the carb-ratio dose.
    pub dose_noise_sd: f64,
    /// Share of meal boluses that add a correction for glucose above 120 mg/dL.
    pub meal_correction_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_patients: 21,
            days_per_patient: 26.0,
            seed: 8,
            meal_rate: 2.7,
            noise_sd: 4.0,
            start: Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap(),
            age_mean: 57.4,
            age_sd: 16.2,
            female_fraction: 11.0 / 21.0,
            hispanic_fraction: 3.0 / 21.0,
            a1c_mean: 6.63,
            a1c_sd: 0.73,
            a1c_min: 5.0,
            a1c_max: 8.2,
            yfd_mean: 32.38,
            yfd_sd: 15.27,
            late_bolus_fraction: 0.12,
            dropout_rate: 0.2,
            dose_noise_sd: 0.35,
            meal_correction_fraction: 0.5,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidConfig(m.to_string()));
        if self.n_patients == 0 {
            return bad("n_patients must be at least 1");
        }
        if !(self.days_per_patient > 0.0) {
            return bad("days_per_patient must be positive");
        }
        if !(self.meal_rate > 0.0 && self.meal_rate <= 3.0) {
            return bad("meal_rate must be in (0, 3]");
        }
        if !(self.noise_sd >= 0.0) {
            return bad("noise_sd must be non-negative");
        }
        if !(self.dose_noise_sd >= 0.0) {
            return bad("dose_noise_sd must be non-negative");
        }
        if !(self.a1c_min < self.a1c_max) {
            return bad("a1c_min must be below a1c_max");
        }
        for (name, p) in [
            ("female_fraction", self.female_fraction),
            ("hispanic_fraction", self.hispanic_fraction),
            ("late_bolus_fraction", self.late_bolus_fraction),
            ("dropout_rate", self.dropout_rate),
            ("meal_correction_fraction", self.meal_correction_fraction),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(SynthError::InvalidConfig(format!("{name} must be in [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Hidden per-patient physiology, drawn once per patient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientParams {
    /// mg/dL drop per insulin unit at peak action.
    pub insulin_sensitivity: f64,
    /// grams covered by one unit.
    pub carb_ratio: f64,
    /// mg/dL rise per gram at peak absorption.
    pub carb_gain: f64,
    /// Baseline glucose the patient reverts to, mg/dL.
    pub mean_glucose: f64,
    /// Stationary spread of the baseline process, mg/dL.
    pub glucose_sd: f64,
    /// Scheduled basal, units/hour.
    pub basal_rate: f64,
    /// Multiplier on the carb-ratio dose the patient actually takes.
    pub dosing_adherence: f64,
    /// Habitual bolus timing relative to the meal, minutes.
    pub usual_prebolus: f64,
}

impl PatientParams {
    /// Basal delivered over 90 minutes on the regular schedule.
    pub fn nominal_premeal_basal(&self) -> f64 {
        self.basal_rate * 1.5
    }

    /// A fixed, typical patient; handy for curve-level tests.
    pub fn reference() -> Self {
        Self {
            insulin_sensitivity: 50.0,
            carb_ratio: 12.0,
            carb_gain: 4.0,
            mean_glucose: 140.0,
            glucose_sd: 20.0,
            basal_rate: 0.9,
            dosing_adherence: 0.9,
            usual_prebolus: -10.0,
        }
    }
}

/// mg/dL drift over a window caused by basal deviating from schedule.
fn basal_drift(params: &PatientParams, delivered_90min: f64) -> f64 {
    -0.4 * params.insulin_sensitivity * (delivered_90min - params.nominal_premeal_basal())
}

fn exercise_uptake(minutes_into: f64) -> f64 {
    // linear ramp to −30 mg/dL over the hour, then slow recovery
    if minutes_into <= 0.0 {
        0.0
    } else if minutes_into <= 60.0 {
        -30.0 * minutes_into / 60.0
    } else {
        (-30.0 + 0.25 * (minutes_into - 60.0)).min(0.0)
    }
}

const SLEEP_DRIFT: f64 = 6.0;

/// Two-hour postprandial curve at 5-minute cadence, time zero at the meal.
///
/// `delta_t` is the bolus time relative to the meal (negative = before).
#[allow(clippy::too_many_arguments)]
pub fn simulate_postprandial_curve(
    premeal_bgl: f64,
    carb: f64,
    bolus: f64,
    delta_t: f64,
    basal: f64,
    mode: Mode,
    params: &PatientParams,
    noise_sd: f64,
    noise_seed: u64,
) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let noise = Normal::new(0.0, noise_sd.max(0.0)).expect("finite sd");
    (0..=24)
        .map(|k| {
            let s = 5.0 * k as f64;
            let frac = s / 120.0;
            let mode_drift = match mode {
                Mode::Regular => 0.0,
                Mode::Sleep => SLEEP_DRIFT * frac,
                Mode::Exercise => exercise_uptake(s),
            };
            let bgl = premeal_bgl + params.carb_gain * carb * carb_absorption(s)
                - params.insulin_sensitivity * bolus * insulin_action(s - delta_t)
                + basal_drift(params, basal) * frac
                + mode_drift
                + if noise_sd > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            bgl.clamp(40.0, 400.0)
        })
        .collect()
}

fn mix_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn normal(rng: &mut ChaCha8Rng, mean: f64, sd: f64) -> f64 {
    Normal::new(mean, sd).expect("finite sd").sample(rng)
}

fn round_to(v: f64, step: f64) -> f64 {
    (v / step).round() * step
}

fn draw_profile(cfg: &SynthConfig, rng: &mut ChaCha8Rng, index: usize) -> PatientProfile {
    let age = normal(rng, cfg.age_mean, cfg.age_sd).clamp(20.0, 85.0).round();
    let sex = if rng.random::<f64>() < cfg.female_fraction { Sex::F } else { Sex::M };
    let ethnicity = if rng.random::<f64>() < cfg.hispanic_fraction {
        Ethnicity::Hispanic
    } else {
        Ethnicity::White
    };
    let a1c = round_to(
        normal(rng, cfg.a1c_mean, cfg.a1c_sd).clamp(cfg.a1c_min, cfg.a1c_max),
        0.1,
    );
    let yfd = round_to(
        normal(rng, cfg.yfd_mean, cfg.yfd_sd).clamp(1.0, (age - 5.0).max(1.0)),
        0.5,
    );
    PatientProfile {
        patient_id: format!("p{:02}", index + 1),
        age: age as u32,
        sex,
        ethnicity,
        a1c,
        years_from_diagnosis: yfd,
    }
}

fn draw_params(rng: &mut ChaCha8Rng, profile: &PatientProfile) -> PatientParams {
    let insulin_sensitivity = rng.random_range(35.0..65.0);
    let carb_ratio = rng.random_range(8.0..15.0);
    // older patients see slightly larger excursions
    let age_factor = 1.0 + (profile.age as f64 - 57.0) / 250.0;
    PatientParams {
        insulin_sensitivity,
        carb_ratio,
        carb_gain: insulin_sensitivity / carb_ratio * age_factor * rng.random_range(0.85..1.0),
        // estimated average glucose from A1C
        mean_glucose: 28.7 * profile.a1c - 46.7 - 15.0 + normal(rng, 0.0, 8.0),
        glucose_sd: rng.random_range(10.0..16.0),
        basal_rate: round_to(rng.random_range(0.5..1.3), 0.05),
        dosing_adherence: rng.random_range(0.55..0.85),
        usual_prebolus: rng.random_range(-28.0..-8.0),
    }
}

/// Planned behavior for one meal before glucose is simulated.
struct Meal {
    meal: DateTime<Utc>,
    bolus: DateTime<Utc>,
    carbs: f64,
    units: f64,
    /// Adds a correction for the glucose seen at bolus time.
    corrects: bool,
    snack: Option<(DateTime<Utc>, f64)>,
}

struct Effect {
    at: DateTime<Utc>,
    kind: EffectKind,
}

enum EffectKind {
    Carb(f64),
    Insulin(f64),
    Exercise,
}

fn minutes_f(d: TimeDelta) -> f64 {
    d.num_seconds() as f64 / 60.0
}

/// Generates one patient's stream from its own seed.
pub fn generate_patient(cfg: &SynthConfig, index: usize) -> (PatientStream, PatientProfile, PatientParams) {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, index as u64));
    let profile = draw_profile(cfg, &mut rng, index);
    let params = draw_params(&mut rng, &profile);
    let mut stream = PatientStream::new(profile.patient_id.clone());

    let n_readings = (cfg.days_per_patient * 288.0).round() as usize;
    let end = cfg.start + TimeDelta::minutes(CGM_CADENCE_MIN * n_readings as i64);
    let days = cfg.days_per_patient.ceil() as i64;
    let day0 = cfg.start;
    let at = |day: i64, minute: f64| day0 + TimeDelta::days(day) + TimeDelta::minutes(minute.round() as i64);

    // Device modes: sleep most nights, occasional afternoon exercise.
    let mut modes: Vec<ModeChange> = Vec::new();
    let mut exercise_starts = Vec::new();
    for d in 0..days {
        if rng.random::<f64>() < 0.85 {
            let on = at(d, normal(&mut rng, 23.0 * 60.0, 30.0));
            let off = at(d + 1, normal(&mut rng, 7.0 * 60.0, 45.0));
            modes.push(ModeChange { timestamp: on, mode: Mode::Sleep });
            modes.push(ModeChange { timestamp: off, mode: Mode::Regular });
        }
        if rng.random::<f64>() < 0.15 {
            let on = at(d, rng.random_range(15.0 * 60.0..18.5 * 60.0));
            exercise_starts.push(on);
            modes.push(ModeChange { timestamp: on, mode: Mode::Exercise });
            modes.push(ModeChange {
                timestamp: on + TimeDelta::minutes(60),
                mode: Mode::Regular,
            });
        }
    }
    modes.sort_by_key(|m| m.timestamp);
    modes.dedup_by_key(|m| m.timestamp);
    stream.modes = modes.into_iter().filter(|m| m.timestamp < end).collect();

    // Basal schedule with a dawn bump; sleep mode trims delivery by 20%.
    let schedule = |minute_of_day: f64| -> f64 {
        let factor = match minute_of_day as i64 / 60 {
            0..=3 => 0.9,
            4..=7 => 1.15,
            8..=19 => 1.0,
            _ => 0.95,
        };
        round_to(params.basal_rate * factor, 0.01)
    };
    let mut change_points: Vec<DateTime<Utc>> = (0..days)
        .flat_map(|d| [0.0, 4.0, 8.0, 20.0].map(|h| at(d, h * 60.0)))
        .chain(stream.modes.iter().map(|m| m.timestamp))
        .filter(|t| *t < end)
        .collect();
    change_points.sort();
    change_points.dedup();
    let mut basals: Vec<BasalRate> = Vec::new();
    for t in change_points {
        let minute_of_day = minutes_f(t - day0).rem_euclid(1440.0);
        let sleeping = stream.mode_at(t) == Mode::Sleep;
        let rate = round_to(schedule(minute_of_day) * if sleeping { 0.8 } else { 1.0 }, 0.01);
        if basals.last().is_none_or(|b| b.rate != rate) {
            basals.push(BasalRate { timestamp: t, rate });
        }
    }
    stream.basals = basals;

    // Meals with bolus timing habits and dosing errors.
    let slots = [(7.5, 45.0), (12.5, 45.0), (18.5, 60.0)];
    let take = cfg.meal_rate / 3.0;
    let mut meals: Vec<Meal> = Vec::new();
    for d in 0..days {
        for (hour, spread) in slots {
            if rng.random::<f64>() >= take {
                continue;
            }
            let meal = at(d, normal(&mut rng, hour * 60.0, spread));
            let carbs = round_to(
                (normal(&mut rng, 3.55, 0.4).exp()).clamp(10.0, 120.0),
                1.0,
            );
            let offset = if rng.random::<f64>() < cfg.late_bolus_fraction {
                rng.random_range(0.0..20.0)
            } else {
                (params.usual_prebolus + normal(&mut rng, 0.0, 8.0)).min(-1.0)
            };
            let bolus = meal + TimeDelta::minutes(offset.round() as i64);
            let dose = carbs / params.carb_ratio
                * params.dosing_adherence
                * normal(&mut rng, 0.0, cfg.dose_noise_sd).exp();
            let corrects = rng.random::<f64>() < cfg.meal_correction_fraction;
            let snack = (rng.random::<f64>() < 0.12).then(|| {
                (
                    meal + TimeDelta::minutes(rng.random_range(25..70)),
                    round_to(rng.random_range(5.0..15.0), 1.0),
                )
            });
            meals.push(Meal {
                meal,
                bolus,
                carbs,
                units: dose,
                corrects,
                snack,
            });
        }
    }
    meals.sort_by_key(|m| m.bolus);
    // keep meals at least 3.5 hours apart so postprandial windows do not collide
    let mut kept: Vec<Meal> = Vec::new();
    for m in meals {
        if m.bolus >= end - TimeDelta::hours(4) {
            continue;
        }
        if kept
            .last()
            .is_none_or(|k| m.bolus - k.bolus >= TimeDelta::minutes(210))
        {
            kept.push(m);
        }
    }

    // Glucose: baseline OU process plus superposed effects.
    let mut effects: Vec<Effect> = Vec::new();
    for m in &kept {
        effects.push(Effect { at: m.meal, kind: EffectKind::Carb(m.carbs) });
        if let Some((t, g)) = m.snack {
            effects.push(Effect { at: t, kind: EffectKind::Carb(g) });
        }
    }
    for &t in &exercise_starts {
        effects.push(Effect { at: t, kind: EffectKind::Exercise });
    }

    // Correction boluses react to the simulated glucose, so the insulin
    // effects are collected while the trace is built.
    let mut boluses: Vec<Bolus> = Vec::new();
    let mut carbs: Vec<CarbEntry> = Vec::new();
    let mut pending = kept.iter().peekable();

    let theta = 1.0 / 150.0;
    let decay = (-theta * CGM_CADENCE_MIN as f64).exp();
    let innovation = params.glucose_sd * (1.0 - decay * decay).sqrt();
    let mut baseline = params.mean_glucose + normal(&mut rng, 0.0, params.glucose_sd);
    let sensor = Normal::new(0.0, cfg.noise_sd.max(1e-9)).expect("finite sd");
    let mut cgm: Vec<CgmReading> = Vec::with_capacity(n_readings);
    let mut last_correction = cfg.start - TimeDelta::days(1);
    let mut dropout_until = cfg.start;
    let mut delivered_basal: Vec<f64> = Vec::with_capacity(n_readings);
    let mut last_bgl = baseline;

    for k in 0..n_readings {
        let t = cfg.start + TimeDelta::minutes(CGM_CADENCE_MIN * k as i64);
        // place meal boluses (and their carb entries) once reached
        while let Some(m) = pending.peek() {
            if m.bolus > t {
                break;
            }
            let correction = if m.corrects {
                (last_bgl - 120.0).max(0.0) / params.insulin_sensitivity
            } else {
                0.0
            };
            let units = round_to(m.units + correction, 0.01);
            boluses.push(Bolus { timestamp: m.bolus, units, kind: BolusKind::Food });
            carbs.push(CarbEntry { timestamp: m.bolus, grams: m.carbs });
            if let Some((st, g)) = m.snack {
                carbs.push(CarbEntry { timestamp: st, grams: g });
            }
            effects.push(Effect { at: m.bolus, kind: EffectKind::Insulin(units) });
            pending.next();
        }

        baseline = params.mean_glucose
            + (baseline - params.mean_glucose) * decay
            + innovation * normal(&mut rng, 0.0, 1.0);

        let rate = {
            let i = stream.basals.partition_point(|b| b.timestamp <= t);
            if i == 0 { params.basal_rate } else { stream.basals[i - 1].rate }
        };
        delivered_basal.push(rate * CGM_CADENCE_MIN as f64 / 60.0);
        let window = 18.min(delivered_basal.len());
        let last_90: f64 = delivered_basal[delivered_basal.len() - window..].iter().sum::<f64>()
            * 18.0 / window as f64;

        let mut bgl = baseline + basal_drift(&params, last_90) * 0.5;
        if stream.mode_at(t) == Mode::Sleep {
            bgl += SLEEP_DRIFT;
        }
        let horizon = t - TimeDelta::minutes(KERNEL_SUPPORT_MIN as i64);
        for e in effects.iter().filter(|e| e.at > horizon && e.at <= t) {
            let s = minutes_f(t - e.at);
            bgl += match e.kind {
                EffectKind::Carb(g) => params.carb_gain * g * carb_absorption(s),
                EffectKind::Insulin(u) => -params.insulin_sensitivity * u * insulin_action(s),
                EffectKind::Exercise => exercise_uptake(s),
            };
        }
        let bgl = bgl.clamp(40.0, 400.0);
        last_bgl = bgl;

        // occasional correction when high and away from meals
        let near_meal = kept
            .iter()
            .any(|m| (minutes_f(t - m.bolus)).abs() < 150.0 || (minutes_f(m.bolus - t) > 0.0 && minutes_f(m.bolus - t) < 60.0));
        if bgl > 230.0
            && !near_meal
            && t - last_correction > TimeDelta::hours(3)
            && rng.random::<f64>() < 0.3
        {
            let units = round_to((bgl - 130.0) / params.insulin_sensitivity * 0.5, 0.01);
            let when = t + TimeDelta::minutes(1);
            boluses.push(Bolus { timestamp: when, units, kind: BolusKind::Correction });
            effects.push(Effect { at: when, kind: EffectKind::Insulin(units) });
            last_correction = t;
        }

        // sensor dropouts
        if t >= dropout_until && rng.random::<f64>() < cfg.dropout_rate / 288.0 {
            dropout_until = t + TimeDelta::minutes(rng.random_range(2..18) * CGM_CADENCE_MIN);
        }
        let reading = (bgl + if cfg.noise_sd > 0.0 { sensor.sample(&mut rng) } else { 0.0 })
            .clamp(40.0, 400.0)
            .round();
        if t >= dropout_until {
            cgm.push(CgmReading { timestamp: t, bgl: reading });
        }
        // prune effects that no longer contribute
        if k % 288 == 0 {
            effects.retain(|e| e.at > horizon);
        }
    }

    boluses.sort_by_key(|b| b.timestamp);
    boluses.dedup_by_key(|b| b.timestamp);
    carbs.sort_by_key(|c| c.timestamp);
    carbs.dedup_by_key(|c| c.timestamp);
    stream.cgm = cgm;
    stream.boluses = boluses;
    stream.carbs = carbs;
    (stream, profile, params)
}

/// Full cohort. Each patient is generated from its own derived seed, so the
/// result is identical whether patients are built sequentially or in parallel.
pub fn generate_cohort(cfg: &SynthConfig) -> Result<(Vec<PatientStream>, Vec<PatientProfile>), SynthError> {
    use rayon::prelude::*;
    cfg.validate()?;
    let patients: Vec<_> = (0..cfg.n_patients)
        .into_par_iter()
        .map(|i| generate_patient(cfg, i))
        .collect();
    Ok(patients.into_iter().map(|(s, p, _)| (s, p)).unzip())
}
