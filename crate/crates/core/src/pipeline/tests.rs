use super::*;
use crate::domain::{Ethnicity, Sex};
use chrono::TimeZone;

fn at(h: u32, m: u32) -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2024, 3, 1, h, m, 0).unwrap()
}

/// CGM every 5 minutes from `start` for `count` readings with values `f(k)`.
fn cgm(start: DateTime<Utc>, count: usize, f: impl Fn(usize) -> f64) -> Vec<CgmReading> {
    (0..count)
        .map(|k| CgmReading {
            timestamp: start + minutes(5 * k as i64),
            bgl: f(k),
        })
        .collect()
}

fn flat_stream(value: f64) -> PatientStream {
    let mut s = PatientStream::new("p");
    s.cgm = cgm(at(9, 0), 12 * 9, |_| value);
    s
}

fn profile() -> PatientProfile {
    PatientProfile {
        patient_id: "p".into(),
        age: 41,
        sex: Sex::F,
        ethnicity: Ethnicity::White,
        a1c: 6.3,
        years_from_diagnosis: 20.0,
    }
}

#[test]
fn peak_single_spike() {
    let mut s = flat_stream(120.0);
    let spike = at(13, 30);
    s.cgm.iter_mut().find(|r| r.timestamp == spike).unwrap().bgl = 195.0;
    assert_eq!(locate_postprandial_peak(&s, at(12, 0)).unwrap(), (195.0, spike));
}

#[test]
fn peak_ties_resolve_to_earliest() {
    let mut s = flat_stream(120.0);
    for t in [at(13, 0), at(13, 30)] {
        s.cgm.iter_mut().find(|r| r.timestamp == t).unwrap().bgl = 210.0;
    }
    let (v, t) = locate_postprandial_peak(&s, at(12, 0)).unwrap();
    // scan oracle: first index attaining the max
    let window = s.cgm_between(at(12, 0), at(14, 0));
    let max = window.iter().map(|r| r.bgl).fold(f64::MIN, f64::max);
    let first = window.iter().find(|r| r.bgl == max).unwrap();
    assert_eq!((v, t), (210.0, first.timestamp));
    assert_eq!(t, at(13, 0));
}

#[test]
fn twenty_minute_gap_is_insufficient() {
    let mut s = flat_stream(120.0);
    // drop 13:00, 13:05, 13:10 → readings at 12:55 and 13:15, a 20 minute gap
    s.cgm.retain(|r| !(r.timestamp >= at(13, 0) && r.timestamp <= at(13, 10)));
    assert!(matches!(
        locate_postprandial_peak(&s, at(12, 0)),
        Err(PipelineError::InsufficientCoverage { .. })
    ));
    // a 15 minute gap is tolerated
    let mut s = flat_stream(120.0);
    s.cgm.retain(|r| !(r.timestamp >= at(13, 0) && r.timestamp <= at(13, 5)));
    assert!(locate_postprandial_peak(&s, at(12, 0)).is_ok());
}

#[test]
fn delta_t_worked_examples() {
    let (t_meal, dt) = infer_meal_and_delta_t(at(12, 0), at(13, 30));
    assert_eq!(t_meal, at(12, 18));
    assert_eq!(dt, -18.0);
    let (t_meal, dt) = infer_meal_and_delta_t(at(12, 0), at(13, 12));
    assert_eq!(t_meal, at(12, 0));
    assert_eq!(dt, 0.0);
    let (_, dt) = infer_meal_and_delta_t(at(12, 15), at(13, 12));
    assert_eq!(dt, 15.0);
}

fn bolus(t: DateTime<Utc>, units: f64) -> Bolus {
    Bolus {
        timestamp: t,
        units,
        kind: BolusKind::Food,
    }
}

#[test]
fn total_bolus_window_membership() {
    let mut s = PatientStream::new("p");
    let (t_meal, t_fb, t_max) = (at(12, 18), at(12, 0), at(13, 30));
    assert_eq!(total_bolus(&s, t_meal, t_fb, t_max), 0.0);
    s.boluses = vec![bolus(at(12, 0), 1.82)];
    assert_eq!(total_bolus(&s, t_meal, t_fb, t_max), 1.82);
    s.boluses = vec![bolus(at(12, 40), 2.0), bolus(at(13, 31), 3.0)];
    // oracle: sum of boluses with start <= t <= t_max
    let oracle: f64 = s
        .boluses
        .iter()
        .filter(|b| b.timestamp >= t_fb && b.timestamp <= t_max)
        .map(|b| b.units)
        .sum();
    assert_eq!(total_bolus(&s, t_meal, t_fb, t_max), oracle);
    assert_eq!(oracle, 2.0);
}

fn basal(t: DateTime<Utc>, rate: f64) -> BasalRate {
    BasalRate { timestamp: t, rate }
}

#[test]
fn basal_integration_fixtures() {
    let t_meal = at(12, 0);
    let mut s = PatientStream::new("p");
    assert_eq!(total_basal(&s, t_meal), 0.0);
    s.basals = vec![basal(at(6, 0), 1.0)];
    assert!((total_basal(&s, t_meal) - 1.5).abs() < 1e-12);
    // 2 u/h for the first 30 minutes of the window, then off
    s.basals = vec![basal(at(10, 30), 2.0), basal(at(11, 0), 0.0)];
    assert!((total_basal(&s, t_meal) - 1.0).abs() < 1e-12);
    s.basals = vec![basal(at(0, 0), 0.0)];
    assert_eq!(total_basal(&s, t_meal), 0.0);
    // rate changes exactly at the meal do not count
    s.basals = vec![basal(at(10, 0), 0.8), basal(t_meal, 5.0)];
    assert!((total_basal(&s, t_meal) - 1.2).abs() < 1e-12);
}

#[test]
fn exact_linear_slope() {
    let mut s = PatientStream::new("p");
    let t_meal = at(12, 0);
    s.cgm = cgm(t_meal - minutes(30), 7, |k| 100.0 + 10.0 * k as f64);
    let (bgl, slope) = premeal_bgl_and_slope(&s, t_meal).unwrap();
    assert_eq!(bgl, 160.0);
    assert!((slope - 10.0).abs() < 1e-12);
    s.cgm = cgm(t_meal - minutes(30), 7, |_| 129.0);
    assert_eq!(premeal_bgl_and_slope(&s, t_meal).unwrap(), (129.0, 0.0));
}

/// Ordinary least squares slope computed with the closed form
/// `(nΣxy − ΣxΣy) / (nΣx² − (Σx)²)`.
fn ols_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let sx: f64 = points.iter().map(|p| p.0).sum();
    let sy: f64 = points.iter().map(|p| p.1).sum();
    let sxy: f64 = points.iter().map(|p| p.0 * p.1).sum();
    let sxx: f64 = points.iter().map(|p| p.0 * p.0).sum();
    (n * sxy - sx * sy) / (n * sxx - sx * sx)
}

#[test]
fn noisy_slope_recovers_table_value() {
    let t_meal = at(12, 0);
    let noise = [0.4, -0.3, 0.1, -0.5, 0.6, -0.2, -0.1];
    let mut s = PatientStream::new("p");
    s.cgm = cgm(t_meal - minutes(30), 7, |k| {
        129.0 - 2.943 * (6 - k) as f64 + noise[k] * 0.05
    });
    let (bgl, slope) = premeal_bgl_and_slope(&s, t_meal).unwrap();
    let pts: Vec<_> = s
        .cgm
        .iter()
        .map(|r| ((r.timestamp - t_meal).num_minutes() as f64, r.bgl))
        .collect();
    assert!((slope - 5.0 * ols_slope(&pts)).abs() < 1e-9);
    assert!((slope - 2.943).abs() < 0.01, "slope {slope}");
    assert!((bgl - 129.0).abs() < 0.1);
}

#[test]
fn premeal_requires_recent_reading() {
    let t_meal = at(12, 0);
    let mut s = PatientStream::new("p");
    s.cgm = cgm(t_meal - minutes(30), 4, |_| 120.0); // last reading at −15
    assert!(premeal_bgl_and_slope(&s, t_meal).is_err());
    s.cgm = cgm(t_meal - minutes(10), 3, |_| 120.0);
    assert!(premeal_bgl_and_slope(&s, t_meal).is_err());
}

fn carb(t: DateTime<Utc>, grams: f64) -> CarbEntry {
    CarbEntry { timestamp: t, grams }
}

#[test]
fn carb_filter_keeps_largest_in_window() {
    let (t_meal, t_fb, t_max) = (at(12, 18), at(12, 0), at(13, 30));
    let mut s = PatientStream::new("p");
    s.carbs = vec![carb(at(12, 0), 35.0), carb(at(12, 40), 12.0)];
    assert_eq!(filter_carbs(&s, t_meal, t_fb, t_max).unwrap(), 35.0);
    s.carbs = vec![carb(at(12, 0), 20.0)];
    assert_eq!(filter_carbs(&s, t_meal, t_fb, t_max).unwrap(), 20.0);
    s.carbs = vec![carb(at(12, 5), 15.0), carb(at(14, 0), 90.0)];
    assert_eq!(filter_carbs(&s, t_meal, t_fb, t_max).unwrap(), 15.0);
    s.carbs.clear();
    assert!(matches!(
        filter_carbs(&s, t_meal, t_fb, t_max),
        Err(PipelineError::NoCarbEntry { .. })
    ));
}

#[test]
fn outcome_threshold_is_strict() {
    let t_meal = at(12, 0);
    for (peak, expected) in [
        (195.0, Outcome::Hyperglycemia),
        (180.0, Outcome::Normoglycemia),
        (180.1, Outcome::Hyperglycemia),
        (179.9, Outcome::Normoglycemia),
    ] {
        let mut s = flat_stream(120.0);
        s.cgm.iter_mut().find(|r| r.timestamp == at(13, 0)).unwrap().bgl = peak;
        assert_eq!(label_outcome(&s, t_meal).unwrap(), expected, "peak {peak}");
    }
}

/// A clean meal: bolus at 12:00 with 40 g, glucose rising to a peak at 13:30.
fn meal_stream() -> PatientStream {
    let mut s = PatientStream::new("p");
    let start = at(9, 0);
    s.cgm = cgm(start, 12 * 9, |k| {
        let t = start + minutes(5 * k as i64);
        let from_peak = (t - at(13, 30)).num_minutes().abs() as f64;
        (200.0 - from_peak).max(110.0)
    });
    s.boluses = vec![bolus(at(12, 0), 4.0)];
    s.carbs = vec![carb(at(12, 0), 40.0)];
    s.basals = vec![basal(at(0, 0), 1.0)];
    s
}

#[test]
fn build_dataset_emits_labeled_sample() {
    let s = meal_stream();
    let build = build_dataset(&[s.clone()], &[profile()]).unwrap();
    assert!(build.skipped.is_empty(), "{:?}", build.skipped);
    let sample = &build.samples[0];
    assert_eq!(sample.meal_timestamp, at(12, 18));
    assert_eq!(sample.delta_t, -18.0);
    assert_eq!(sample.carb_size, 40.0);
    assert_eq!(sample.total_bolus, 4.0);
    assert!((sample.total_basal - 1.5).abs() < 1e-12);
    assert_eq!(sample.outcome, Outcome::Hyperglycemia);
    assert_eq!(sample.age, 41);
    // idempotence: relabeling from the stored meal time reproduces the outcome
    assert_eq!(label_outcome(&s, sample.meal_timestamp).unwrap(), sample.outcome);
}

#[test]
fn build_dataset_edge_cases() {
    let empty = PatientStream::new("p");
    let build = build_dataset(&[empty], &[profile()]).unwrap();
    assert!(build.samples.is_empty() && build.skipped.is_empty());

    let mut gappy = meal_stream();
    gappy
        .cgm
        .retain(|r| !(r.timestamp > at(12, 30) && r.timestamp < at(13, 0)));
    let build = build_dataset(&[gappy], &[profile()]).unwrap();
    assert!(build.samples.is_empty());
    assert_eq!(build.skipped.len(), 1);
    assert!(build.skipped[0].reason.contains("coverage"));

    assert!(matches!(
        build_dataset(&[PatientStream::new("ghost")], &[profile()]),
        Err(PipelineError::MissingProfile(_))
    ));
}

#[test]
fn food_bolus_needs_nearby_carbs() {
    let mut s = meal_stream();
    s.boluses.push(Bolus {
        timestamp: at(15, 0),
        units: 1.0,
        kind: BolusKind::Correction,
    });
    assert_eq!(s.food_bolus_times(), vec![at(12, 0)]);
    s.carbs.push(carb(at(15, 9), 10.0));
    assert_eq!(s.food_bolus_times(), vec![at(12, 0), at(15, 0)]);
}

#[test]
fn raw_csv_round_trip() {
    let mut s = meal_stream();
    s.modes = vec![ModeChange {
        timestamp: at(10, 0),
        mode: Mode::Exercise,
    }];
    let mut buf = Vec::new();
    write_stream(&mut buf, &s).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert!(text.starts_with("timestamp,event_type,value\n"));
    assert!(text.contains("2024-03-01T10:00:00Z,mode,exercise"));
    let back = read_stream("p", buf.as_slice()).unwrap();
    assert_eq!(back, s);
}

#[test]
fn raw_csv_rejects_unknown_events() {
    let text = "timestamp,event_type,value\n2024-03-01T10:00:00Z,steps,100\n";
    assert!(matches!(
        read_stream("p", text.as_bytes()),
        Err(PipelineError::Parse { line: 2, .. })
    ));
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn adding_in_window_events_never_decreases(
            units in proptest::collection::vec(0.0f64..10.0, 0..6),
            extra in 0.0f64..10.0,
            grams in proptest::collection::vec(1.0f64..120.0, 1..6),
            extra_g in 0.0f64..150.0,
        ) {
            let (t_meal, t_fb, t_max) = (at(12, 18), at(12, 0), at(13, 30));
            let mut s = PatientStream::new("p");
            s.boluses = units.iter().enumerate().map(|(k, &u)| bolus(at(12, 0) + minutes(7 * k as i64), u)).collect();
            s.carbs = grams.iter().enumerate().map(|(k, &g)| carb(at(12, 0) + minutes(7 * k as i64), g)).collect();
            let before_b = total_bolus(&s, t_meal, t_fb, t_max);
            let before_c = filter_carbs(&s, t_meal, t_fb, t_max).unwrap();
            s.boluses.push(bolus(at(13, 29), extra));
            s.carbs.push(carb(at(13, 29), extra_g));
            prop_assert!(total_bolus(&s, t_meal, t_fb, t_max) >= before_b);
            prop_assert!(filter_carbs(&s, t_meal, t_fb, t_max).unwrap() >= before_c);
        }
    }
}
