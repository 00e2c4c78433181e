use super::*;
use crate::domain::fixtures::{row_one, row_two};
use crate::domain::{default_schema, BoundsSource, Feature, FeatureSpec};
use crate::models::FnPredictor;
use proptest::prelude::*;

fn sigma(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Target-class (normoglycemia) probability `σ(w·x + b)`.
struct Logistic {
    w: Vec<f64>,
    b: f64,
}

impl Predictor for Logistic {
    fn predict_proba(&self, x: &[f64]) -> Result<[f64; 2], ModelError> {
        let z = self.b + self.w.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        let p = sigma(z);
        Ok([p, 1.0 - p])
    }
}

fn lever(name: &str, step: f64, min: f64, max: f64) -> FeatureSpec {
    FeatureSpec::continuous(name, "", min, max).modifiable(step, BoundsSource::Fixed)
}

fn ab_schema() -> FeatureSchema {
    FeatureSchema::new(vec![lever("a", 0.1, -1.0, 1.0), lever("b", 0.1, -1.0, 1.0)]).unwrap()
}

#[test]
fn saliency_matches_sigmoid_quotients() {
    let p = Logistic { w: vec![2.0, -1.0], b: 0.0 };
    let s = ab_schema();
    let x = [0.5, 0.5];
    let sa = forward_saliency(&p, &x, 0, 0.1, Outcome::Normoglycemia, &s).unwrap();
    let sb = forward_saliency(&p, &x, 1, 0.1, Outcome::Normoglycemia, &s).unwrap();
    assert!((sa - (sigma(0.7) - sigma(0.5)) / 0.1).abs() < 1e-12);
    assert!((sb - (sigma(0.4) - sigma(0.5)) / 0.1).abs() < 1e-12);
    assert!((sa - 0.4573).abs() < 5e-5);
    assert!((sb + 0.2377).abs() < 5e-5);
}

#[test]
fn constant_predictor_has_zero_saliency() {
    let p = FnPredictor(|_: &[f64]| 0.7);
    let s = ab_schema();
    for i in 0..2 {
        assert_eq!(forward_saliency(&p, &[0.3, -0.2], i, 0.1, Outcome::Normoglycemia, &s).unwrap(), 0.0);
    }
}

#[test]
fn saliency_rejects_fixed_features() {
    let p = FnPredictor(|_: &[f64]| 0.7);
    let s = default_schema();
    let x = row_one().features();
    assert!(matches!(
        forward_saliency(&p, &x, Feature::A1c.index(), 0.1, Outcome::Normoglycemia, &s),
        Err(EngineError::NotModifiable(_))
    ));
}

#[test]
fn combined_scores_examples() {
    let s = ab_schema();
    let w = PreferenceWeights::new(vec![1.0, 0.5], vec![1.0, 0.0]).unwrap();
    let c = combined_scores(&[0.4, -0.8], &w, &[1, 1], &s);
    assert!((c[0] - 2.5).abs() < 1e-15 && (c[1] - 1.5).abs() < 1e-15);

    let ones = PreferenceWeights::uniform(2, 0.5);
    assert_eq!(combined_scores(&[0.0, 0.0], &ones, &[1, 1], &s), vec![1.0, 1.0]);
    let unit = PreferenceWeights::uniform(2, 1.0);
    assert_eq!(combined_scores(&[0.0, 0.0], &unit, &[1, 1], &s), vec![2.0, 2.0]);
    assert_eq!(combined_scores(&[0.9, 0.1], &unit, &[0, 1], &s)[0], 0.0);
}

#[test]
fn combined_scores_never_select_fixed_features() {
    let s = default_schema();
    let c = combined_scores(&[0.0; 11], &PreferenceWeights::uniform(11, 1.0), &[1; 11], &s);
    for f in Feature::ALL {
        assert_eq!(c[f.index()].is_finite(), s.is_modifiable(f.index()));
    }
}

#[test]
fn selection_skips_zero_saliency_and_breaks_ties_low() {
    let s = ab_schema();
    assert_eq!(select_feature(&[2.0, 2.0], &[0.0, 0.0], &[1, 1], &s), None);
    assert_eq!(select_feature(&[2.0, 2.0], &[0.3, -0.3], &[1, 1], &s), Some(0));
    assert_eq!(select_feature(&[3.0, 2.0], &[0.0, -0.3], &[1, 1], &s), Some(1));
    assert_eq!(select_feature(&[3.0, 2.0], &[0.1, -0.3], &[0, 1], &s), Some(1));
}

#[test]
fn apply_step_examples() {
    let s = default_schema().with_observed_bounds([&row_one(), &row_two()]);
    let mut s = s;
    let carb = Feature::CarbSize.index();
    s.features[carb].min = 18.0;

    let bgl = Feature::PremealBgl.index();
    let mut x = row_one().features();
    x[bgl] = 165.0;
    let mut m = vec![1u8; 11];
    assert!(apply_step(&mut x, bgl, 0.3, 10.0, &s, &mut m).unwrap());
    assert_eq!((x[bgl], m[bgl]), (170.0, 0));

    let mut x = row_one().features();
    x[carb] = 40.0;
    s.features[carb].max = 60.0;
    let mut m = vec![1u8; 11];
    assert!(!apply_step(&mut x, carb, -0.2, 5.0, &s, &mut m).unwrap());
    assert_eq!((x[carb], m[carb]), (35.0, 1));

    let bolus = Feature::TotalBolus.index();
    let mut x = row_two().features();
    let mut m = vec![1u8; 11];
    s.features[bolus].max = 10.0;
    apply_step(&mut x, bolus, 0.1, 0.5, &s, &mut m).unwrap();
    assert!((x[bolus] - 6.33).abs() < 1e-12);

    assert!(matches!(
        apply_step(&mut x, Feature::Age.index(), 0.1, 1.0, &s, &mut m),
        Err(EngineError::NotModifiable(_))
    ));
    m[bolus] = 0;
    assert!(matches!(
        apply_step(&mut x, bolus, 0.1, 0.5, &s, &mut m),
        Err(EngineError::MaskedFeature(_))
    ));
}

#[test]
fn already_confident_returns_factual() {
    let p = Logistic { w: vec![0.0, 0.0], b: 2.2 };
    let r = generate_counterfactual(&p, &[0.1, 0.2], &CfParams::with_unit_weights(ab_schema())).unwrap();
    assert!(r.converged);
    assert_eq!(r.iterations, 0);
    assert_eq!(r.counterfactual, vec![0.1, 0.2]);
}

/// Fewest unit moves on the step lattice that reach `gamma`, searching all
/// step vectors with at most `max_steps` moves in total.
fn lattice_minimum(p: &dyn Predictor, x: &[f64], schema: &FeatureSchema, gamma: f64, max_steps: i32) -> Option<i32> {
    let d = x.len();
    let mut best: Option<i32> = None;
    let mut k = vec![-max_steps; d];
    loop {
        let total: i32 = k.iter().map(|v| v.abs()).sum();
        if total <= max_steps && best.is_none_or(|b| total < b) {
            let y: Vec<f64> = (0..d).map(|i| x[i] + k[i] as f64 * schema.features[i].step).collect();
            let inside = (0..d).all(|i| y[i] >= schema.features[i].min - 1e-12 && y[i] <= schema.features[i].max + 1e-12);
            if inside && p.predict_proba(&y).unwrap()[0] >= gamma {
                best = Some(total);
            }
        }
        let mut j = 0;
        loop {
            if j == d {
                return best;
            }
            k[j] += 1;
            if k[j] <= max_steps {
                break;
            }
            k[j] = -max_steps;
            j += 1;
        }
    }
}

#[test]
fn two_step_logistic_example() {
    let p = Logistic { w: vec![3.0, 1.0], b: 0.0 };
    let params = CfParams::with_unit_weights(ab_schema());
    let r = generate_counterfactual(&p, &[0.0, 0.0], &params).unwrap();
    assert!(r.converged);
    assert_eq!(r.iterations, 2);
    assert!((r.counterfactual[0] - 0.2).abs() < 1e-12);
    assert_eq!(r.counterfactual[1], 0.0);
    assert!((r.final_confidence - sigma(0.6)).abs() < 1e-12);
    assert!((r.final_confidence - 0.6457).abs() < 5e-5);
    assert_eq!(lattice_minimum(&p, &[0.0, 0.0], &params.schema, 0.6, 2), Some(2));
    r.check_invariants(&params).unwrap();
}

#[test]
fn levers_at_bounds_exhaust_the_mask() {
    // target probability rises with both levers, which already sit at max
    let p = Logistic { w: vec![1.0, 1.0], b: -5.0 };
    let params = CfParams::with_unit_weights(ab_schema());
    let r = generate_counterfactual(&p, &[1.0, 1.0], &params).unwrap();
    assert!(!r.converged);
    assert_eq!(r.stop_reason, StopReason::MaskExhausted);
    assert_eq!(r.iterations, 2);
    assert!(r.trajectory.last().unwrap().mask.iter().all(|&m| m == 0));
    assert_eq!(r.counterfactual, vec![1.0, 1.0]);
}

#[test]
fn flat_predictor_stops_without_salient_feature() {
    let p = FnPredictor(|_: &[f64]| 0.9);
    let r = generate_counterfactual(&p, &[0.0, 0.0], &CfParams::with_unit_weights(ab_schema())).unwrap();
    assert_eq!(r.stop_reason, StopReason::NoSalientFeature);
    assert_eq!(r.iterations, 0);
}

#[test]
fn negligible_gains_trigger_plateau() {
    let p = Logistic { w: vec![1e-9, 0.0], b: -1.0 };
    let schema = FeatureSchema::new(vec![lever("a", 0.1, -100.0, 100.0), lever("b", 0.1, -1.0, 1.0)]).unwrap();
    let r = generate_counterfactual(&p, &[0.0, 0.0], &CfParams::with_unit_weights(schema)).unwrap();
    assert_eq!(r.stop_reason, StopReason::Plateau);
    assert_eq!(r.iterations, 10);
}

#[test]
fn iteration_cap_is_respected() {
    let p = Logistic { w: vec![0.5, 0.0], b: -3.0 };
    let schema = FeatureSchema::new(vec![lever("a", 0.1, -100.0, 100.0), lever("b", 0.1, -1.0, 1.0)]).unwrap();
    let params = CfParams { max_iter: 5, ..CfParams::with_unit_weights(schema) };
    let r = generate_counterfactual(&p, &[0.0, 0.0], &params).unwrap();
    assert_eq!(r.stop_reason, StopReason::MaxIterations);
    assert_eq!(r.iterations, 5);
    // one base call, then two probes and one evaluation per iteration
    assert_eq!(r.predictor_calls, 1 + 5 * 3);
}

#[test]
fn out_of_box_levers_are_projected() {
    let s = default_schema().with_observed_bounds([&row_one(), &row_two()]);
    let mut x = row_one().features();
    x[Feature::PremealBgl.index()] = 95.0;
    let p = FnPredictor(|_: &[f64]| 0.2);
    let params = CfParams::with_unit_weights(s);
    let r = generate_counterfactual(&p, &x, &params).unwrap();
    assert_eq!(r.projected, vec![Feature::PremealBgl.index()]);
    assert_eq!(r.counterfactual[Feature::PremealBgl.index()], 100.0);
    r.check_invariants(&params).unwrap();
}

#[test]
fn invalid_params_are_rejected() {
    let p = FnPredictor(|_: &[f64]| 0.2);
    for gamma in [0.49, 1.0, 0.3, f64::NAN] {
        let params = CfParams { gamma, ..CfParams::with_unit_weights(ab_schema()) };
        assert!(matches!(generate_counterfactual(&p, &[0.0, 0.0], &params), Err(EngineError::InvalidParams(_))));
    }
    let params = CfParams::with_unit_weights(ab_schema());
    assert!(matches!(generate_counterfactual(&p, &[0.0], &params), Err(EngineError::InvalidSample(_))));
}

#[test]
fn predictor_failures_carry_the_iteration() {
    let p = FnPredictor(|x: &[f64]| if x[0] > 0.15 { 2.0 } else { 0.9 - x[0] });
    let r = generate_counterfactual(&p, &[0.0, 0.0], &CfParams::with_unit_weights(ab_schema()));
    assert!(matches!(r, Err(EngineError::Predictor { iteration: 2, .. })), "{r:?}");
}

#[test]
fn trajectory_jsonl_has_one_record_per_iteration() {
    let p = Logistic { w: vec![3.0, 1.0], b: 0.0 };
    let params = CfParams::with_unit_weights(ab_schema());
    let r = generate_counterfactual(&p, &[0.0, 0.0], &params).unwrap();
    let mut buf = Vec::new();
    write_trajectory_jsonl(&mut buf, &r).unwrap();
    let lines: Vec<&str> = std::str::from_utf8(&buf).unwrap().lines().collect();
    assert_eq!(lines.len(), 2);
    let back: IterationTrace = serde_json::from_str(lines[1]).unwrap();
    assert_eq!(back, r.trajectory[1]);
}

#[test]
fn fixed_feature_scores_serialize_as_null() {
    let p = Logistic { w: vec![0.0; 11], b: -1.0 };
    let mut w = vec![0.0; 11];
    w[Feature::CarbSize.index()] = -0.05;
    let p = Logistic { w, ..p };
    let params = CfParams::with_unit_weights(default_schema().with_observed_bounds([&row_one(), &row_two()]));
    let r = generate_counterfactual(&p, &row_two().features(), &params).unwrap();
    let json = serde_json::to_value(&r.trajectory[0]).unwrap();
    assert!(json["scores"][Feature::Age.index()].is_null());
    assert!(json["scores"][Feature::CarbSize.index()].is_number());
}

#[test]
fn objective_identity_case() {
    let schema = default_schema();
    let train = [row_one(), row_two()];
    let idx = KnnIndex::new(&schema, &train).unwrap();
    let perfect = FnPredictor(|_: &[f64]| 0.0);
    let params = CfParams::with_unit_weights(schema);
    let mut q = row_one();
    q.carb_size = 25.0;
    let x = q.features();
    let t = objective_value(&x, &x, &perfect, &params, &idx).unwrap();
    assert_eq!(t.cross_entropy, 0.0);
    assert_eq!(t.weighted_l1, 0.0);
    // nearest neighbor is row one, differing only in carbs (range 15)
    assert!((t.manifold_distance - 5.0 / 15.0).abs() < 1e-12);
}

#[test]
fn objective_hand_built_two_feature_case() {
    let schema = ab_schema();
    let idx = KnnIndex::from_rows(
        &schema,
        vec![vec![0.0, 0.0], vec![2.0, 4.0]],
        vec![Outcome::Normoglycemia, Outcome::Hyperglycemia],
    )
    .unwrap();
    let p = Logistic { w: vec![1.0, 0.0], b: 0.0 };
    let weights = PreferenceWeights::new(vec![1.0, 0.25], vec![1.0, 0.25]).unwrap();
    let params = CfParams::new(schema, weights);
    let t = objective_value(&[0.0, 0.0], &[0.5, 1.0], &p, &params, &idx).unwrap();
    // CE = −ln σ(0.5); r = (1, 0.25); L1 = 1·0.5/2 + 0.25·1/4; nearest = origin
    assert!((t.cross_entropy - (1.0 + (-0.5f64).exp()).ln()).abs() < 1e-12);
    assert!((t.weighted_l1 - (0.25 + 0.0625)).abs() < 1e-12);
    assert!((t.manifold_distance - (0.25f64.powi(2) + 0.25f64.powi(2)).sqrt()).abs() < 1e-12);
}

#[test]
fn cross_entropy_falls_along_converged_trajectory() {
    let p = Logistic { w: vec![3.0, 1.0], b: -1.0 };
    let params = CfParams::with_unit_weights(ab_schema());
    let r = generate_counterfactual(&p, &[0.0, 0.0], &params).unwrap();
    assert!(r.converged);
    let ce: Vec<f64> = r.trajectory.iter().map(|t| -t.confidence.ln()).collect();
    assert!(ce.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn nice_baseline_examples() {
    let schema = ab_schema();
    let rows = vec![vec![0.2, 0.0], vec![0.5, 0.0], vec![0.05, 0.0], vec![1.0, 1.0]];
    let labels = vec![
        Outcome::Normoglycemia,
        Outcome::Normoglycemia,
        Outcome::Hyperglycemia,
        Outcome::Hyperglycemia,
    ];
    let idx = KnnIndex::from_rows(&schema, rows, labels.clone()).unwrap();
    assert_eq!(nice_baseline(&idx, &[0.5, 0.0], Outcome::Normoglycemia).unwrap(), vec![0.5, 0.0]);
    assert_eq!(nice_baseline(&idx, &[0.0, 0.0], Outcome::Normoglycemia).unwrap(), vec![0.2, 0.0]);
    let all_hyper = KnnIndex::from_rows(&schema, vec![vec![0.0, 0.0]], vec![Outcome::Hyperglycemia]).unwrap();
    assert!(matches!(
        nice_baseline(&all_hyper, &[0.0, 0.0], Outcome::Normoglycemia),
        Err(EngineError::NoTargetClassInstance(_))
    ));
}

// Property tests over random linear-logistic predictors on the meal schema.

fn proptest_schema() -> FeatureSchema {
    let mut s = default_schema();
    for (f, lo, hi) in [
        (Feature::CarbSize, 10.0, 120.0),
        (Feature::TotalBolus, 0.5, 12.0),
        (Feature::DeltaT, -45.0, 70.0),
    ] {
        s.features[f.index()].min = lo;
        s.features[f.index()].max = hi;
    }
    s
}

fn arb_case() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, f64, Vec<f64>, Vec<f64>)> {
    let coef = prop::collection::vec(-3.0..3.0f64, 11);
    let point = (
        prop::collection::vec(0.0..1.0f64, 11),
        0usize..2,
        0usize..3,
        0usize..3,
        80.0..190.0f64,
    )
        .prop_map(|(u, sex, eth, mode, bgl)| {
            let s = proptest_schema();
            let mut x: Vec<f64> = s
                .features
                .iter()
                .zip(&u)
                .map(|(f, v)| f.min + v * (f.max - f.min))
                .collect();
            x[Feature::Sex.index()] = sex as f64;
            x[Feature::Ethnicity.index()] = eth as f64;
            x[Feature::Mode.index()] = mode as f64;
            x[Feature::PremealBgl.index()] = bgl;
            x
        });
    let weights = (
        prop::collection::vec(0.0..1.0f64, 11),
        prop::collection::vec(0.0..1.0f64, 11),
    );
    (coef, -2.0..1.0f64, point, weights).prop_map(|(c, b, x, (wu, wp))| (c, x, b, wu, wp))
}

/// Logistic over range-scaled features, so coefficients are comparable.
fn scaled_logistic(coef: &[f64], bias: f64) -> Logistic {
    let s = proptest_schema();
    let w = coef.iter().zip(&s.features).map(|(c, f)| c / (f.max - f.min)).collect();
    Logistic { w, b: bias }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn engine_invariants_hold((coef, x, bias, wu, wp) in arb_case()) {
        let p = scaled_logistic(&coef, bias);
        let params = CfParams::new(proptest_schema(), PreferenceWeights::new(wu, wp).unwrap());
        let r = generate_counterfactual(&p, &x, &params).unwrap();
        prop_assert!(r.check_invariants(&params).is_ok(), "{:?}", r.check_invariants(&params));
        prop_assert!(r.iterations <= params.max_iter);
        for t in &r.trajectory {
            prop_assert!(t.saliency.iter().all(|s| s.is_finite()));
            prop_assert!(t.mask.iter().all(|&m| m <= 1));
        }
    }

    #[test]
    fn every_choice_matches_a_scan_oracle((coef, x, bias, wu, wp) in arb_case()) {
        let p = scaled_logistic(&coef, bias);
        let weights = PreferenceWeights::new(wu, wp).unwrap();
        let params = CfParams::new(proptest_schema(), weights.clone());
        let r = generate_counterfactual(&p, &x, &params).unwrap();
        let mut mask: Vec<u8> = (0..11).map(|i| params.schema.is_modifiable(i) as u8).collect();
        for t in &r.trajectory {
            // independent scan: recompute scores from the recorded saliency
            let max = (0..11).filter(|&i| mask[i] == 1).map(|i| t.saliency[i].abs()).fold(0.0, f64::max);
            let mut best: Option<(usize, f64)> = None;
            for i in 0..11 {
                if mask[i] == 0 || t.saliency[i] == 0.0 {
                    continue;
                }
                let c = t.saliency[i].abs() / max + weights.user[i] + weights.physician[i];
                if best.is_none_or(|(_, b)| c > b) {
                    best = Some((i, c));
                }
            }
            prop_assert_eq!(best.map(|b| b.0), Some(t.chosen));
            mask = t.mask.clone();
        }
    }

    #[test]
    fn scaling_uniform_weights_keeps_every_choice((coef, x, bias, _wu, _wp) in arb_case(), w in 0.0..1.0f64, k in 0.05..1.0f64) {
        let p = scaled_logistic(&coef, bias);
        let base = PreferenceWeights::uniform(11, w);
        let a = generate_counterfactual(&p, &x, &CfParams::new(proptest_schema(), base.clone())).unwrap();
        let b = generate_counterfactual(&p, &x, &CfParams::new(proptest_schema(), base.scaled(k))).unwrap();
        let choices = |r: &CounterfactualResult| r.trajectory.iter().map(|t| t.chosen).collect::<Vec<_>>();
        prop_assert_eq!(choices(&a), choices(&b));
        prop_assert_eq!(a.counterfactual, b.counterfactual);
    }

    #[test]
    fn scaling_mixed_weights_can_change_the_choice(k in 0.05..0.4f64) {
        // normalized saliency (1, 0.5) against weights (0, 1): the weight
        // term wins at full scale and loses once scaled below 0.5
        let s = ab_schema();
        let w = PreferenceWeights::new(vec![0.0, 0.5], vec![0.0, 0.5]).unwrap();
        let pick = |w: &PreferenceWeights| {
            let c = combined_scores(&[0.2, 0.1], w, &[1, 1], &s);
            select_feature(&c, &[0.2, 0.1], &[1, 1], &s)
        };
        prop_assert_eq!(pick(&w), Some(1));
        prop_assert_eq!(pick(&w.scaled(k)), Some(0));
    }

    #[test]
    fn higher_gamma_never_shortens_the_search((coef, x, bias, wu, wp) in arb_case()) {
        let p = scaled_logistic(&coef, bias);
        let w = PreferenceWeights::new(wu, wp).unwrap();
        let lo = CfParams { gamma: 0.6, ..CfParams::new(proptest_schema(), w.clone()) };
        let hi = CfParams { gamma: 0.75, ..CfParams::new(proptest_schema(), w) };
        let a = generate_counterfactual(&p, &x, &lo).unwrap();
        let b = generate_counterfactual(&p, &x, &hi).unwrap();
        prop_assert!(b.iterations >= a.iterations);
    }
}
