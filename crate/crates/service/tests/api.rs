use axum::body::Body;
use axum::http::{header, Method, Request, StatusCode};
use axum::Router;
use glytwin_core::domain::fixtures::{row_one, row_two};
use glytwin_core::domain::{default_schema, write_samples, FactualSample, Outcome};
use glytwin_core::models::{train_mlp, MlpSpec, Predictor, TrainedModel};
use glytwin_core::pipeline::build_dataset;
use glytwin_core::synthgen::{generate_cohort, SynthConfig};
use glytwin_service::{router, AppState, Loaded, ServiceConfig};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use std::path::PathBuf;
use std::sync::OnceLock;
use tower::ServiceExt;

struct Fixture {
    _dir: tempfile::TempDir,
    model_path: PathBuf,
    dataset_path: PathBuf,
    model: TrainedModel,
    samples: Vec<FactualSample>,
}

fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let synth = SynthConfig {
            n_patients: 10,
            days_per_patient: 14.0,
            seed: 11,
            ..SynthConfig::default()
        };
        let (streams, profiles) = generate_cohort(&synth).unwrap();
        let samples = build_dataset(&streams, &profiles).unwrap().samples;
        let spec = MlpSpec {
            hidden: vec![16, 16],
            epochs: 40,
            ..MlpSpec::default()
        };
        let model = train_mlp(&samples, &default_schema(), &spec, 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let model_path = dir.path().join("classifier.json");
        let dataset_path = dir.path().join("samples.csv");
        model.save(&model_path).unwrap();
        write_samples(std::fs::File::create(&dataset_path).unwrap(), &samples).unwrap();
        Fixture {
            _dir: dir,
            model_path,
            dataset_path,
            model,
            samples,
        }
    })
}

fn loaded_app() -> Router {
    let f = fixture();
    let loaded = Loaded::from_files(&f.model_path, &f.dataset_path).unwrap();
    router(AppState::new(Some(loaded), ServiceConfig::default())).unwrap()
}

fn empty_app() -> Router {
    router(AppState::new(None, ServiceConfig::default())).unwrap()
}

async fn call(app: Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header(header::CONTENT_TYPE, "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = app.oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap()
    };
    (status, value)
}

fn sample_json(s: &FactualSample) -> Value {
    let mut v = serde_json::to_value(s).unwrap();
    v.as_object_mut().unwrap().remove("outcome");
    v
}

/// Sample of the dataset the classifier is most sure about for `class`.
fn most_confident(class: Outcome) -> &'static FactualSample {
    let f = fixture();
    f.samples
        .iter()
        .max_by(|a, b| {
            let p = |s: &FactualSample| f.model.predict_proba(&s.features()).unwrap()[class.class_index()];
            p(a).total_cmp(&p(b))
        })
        .unwrap()
}

fn field_names(body: &Value) -> Vec<String> {
    body["fields"]
        .as_array()
        .unwrap()
        .iter()
        .map(|f| f["field"].as_str().unwrap().to_string())
        .collect()
}

#[tokio::test]
async fn predict_returns_a_distribution() {
    let (status, body) = call(loaded_app(), Method::POST, "/predict", Some(sample_json(&row_one()))).await;
    assert_eq!(status, StatusCode::OK);
    let (pn, ph) = (body["p_normoglycemia"].as_f64().unwrap(), body["p_hyperglycemia"].as_f64().unwrap());
    assert!((0.0..=1.0).contains(&pn) && (0.0..=1.0).contains(&ph));
    assert!((pn + ph - 1.0).abs() < 1e-12);
    let class = body["predicted_class"].as_str().unwrap();
    assert!(class == "normoglycemia" || class == "hyperglycemia");
    let expected = fixture().model.predict_proba(&row_one().features()).unwrap();
    assert_eq!(pn, expected[0]);
}

#[tokio::test]
async fn predict_rejects_malformed_fields() {
    let mut v = sample_json(&row_one());
    let carbs = v.as_object_mut().unwrap().remove("carb_size").unwrap();
    v["carbs"] = carbs;
    let (status, body) = call(loaded_app(), Method::POST, "/predict", Some(v)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["error"], "bad_request");
    assert!(body["fields"][0]["message"].as_str().unwrap().contains("carbs"), "{body}");

    let mut v = sample_json(&row_one());
    v["premeal_bgl"] = json!(900.0);
    v["a1c"] = json!(2.0);
    let (status, body) = call(loaded_app(), Method::POST, "/predict", Some(v)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let fields = field_names(&body);
    assert!(fields.contains(&"premeal_bgl".to_string()) && fields.contains(&"a1c".to_string()), "{body}");

    let mut v = sample_json(&row_one());
    v["sex"] = json!("X");
    let (status, body) = call(loaded_app(), Method::POST, "/predict", Some(v)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(field_names(&body), ["sex"]);

    let (status, _) = call(loaded_app(), Method::POST, "/predict", Some(json!("not an object"))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn requests_before_model_load_get_503() {
    let (status, body) = call(empty_app(), Method::POST, "/predict", Some(sample_json(&row_one()))).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(body["error"], "model_not_loaded");
    let req = json!({ "sample": sample_json(&row_two()) });
    let (status, _) = call(empty_app(), Method::POST, "/counterfactual", Some(req)).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    let (status, _) = call(empty_app(), Method::GET, "/dataset/summary", None).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);

    let (status, body) = call(empty_app(), Method::GET, "/health", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["status"], "model_not_loaded");
    assert!(body["model"].is_null());
    let (status, body) = call(empty_app(), Method::GET, "/schema", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["modifiable"].as_array().unwrap().len(), 4);
}

#[tokio::test]
async fn missing_model_file_starts_unloaded() {
    let config = ServiceConfig {
        model_path: PathBuf::from("/nonexistent/model.json"),
        ..ServiceConfig::default()
    };
    let app = router(AppState::load(config)).unwrap();
    let (status, _) = call(app, Method::POST, "/predict", Some(sample_json(&row_one()))).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
}

#[tokio::test]
async fn schema_lists_four_levers_with_controls() {
    let (status, body) = call(loaded_app(), Method::GET, "/schema", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["schema_version"], 1);
    assert_eq!(body["modifiable"], json!(["carb_size", "total_bolus", "delta_t", "premeal_bgl"]));
    let features = body["features"].as_array().unwrap();
    assert_eq!(features.len(), 11);
    let levers: Vec<&Value> = features.iter().filter(|f| f["modifiable"] == true).collect();
    assert_eq!(levers.len(), 4);
    for f in levers {
        assert!(f["step"].as_f64().unwrap() > 0.0);
        assert!(f["min"].as_f64().unwrap() <= f["max"].as_f64().unwrap());
    }
    let bgl = features.iter().find(|f| f["name"] == "premeal_bgl").unwrap();
    assert_eq!((bgl["min"].as_f64(), bgl["max"].as_f64()), (Some(100.0), Some(170.0)));
}

#[tokio::test]
async fn dataset_summary_matches_a_recount() {
    let (status, body) = call(loaded_app(), Method::GET, "/dataset/summary", None).await;
    assert_eq!(status, StatusCode::OK);
    let samples = &fixture().samples;
    let hyper = samples.iter().filter(|s| s.outcome == Outcome::Hyperglycemia).count();
    assert_eq!(body["n_samples"], samples.len());
    assert_eq!(body["class_balance"]["hyperglycemia"], hyper);
    assert_eq!(body["class_balance"]["normoglycemia"], samples.len() - hyper);
    let carb = body["features"].as_array().unwrap().iter().find(|f| f["name"] == "carb_size").unwrap().clone();
    let max = samples.iter().map(|s| s.carb_size).fold(f64::MIN, f64::max);
    assert_eq!(carb["max"].as_f64(), Some(max));
}

#[tokio::test]
async fn health_reports_model_fingerprint() {
    let (status, body) = call(loaded_app(), Method::GET, "/health", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["status"], "ok");
    let digest = hex::encode(Sha256::digest(std::fs::read(&fixture().model_path).unwrap()));
    assert_eq!(body["model"]["sha256"], digest);
    assert_eq!(body["model"]["kind"], "mlp");
}

fn cf_request(sample: &FactualSample) -> Value {
    json!({ "sample": sample_json(sample) })
}

#[tokio::test]
async fn counterfactual_respects_engine_invariants() {
    let sample = most_confident(Outcome::Hyperglycemia);
    let (status, body) = call(loaded_app(), Method::POST, "/counterfactual", Some(cf_request(sample))).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["violations"], 0);
    let levers = ["carb_size", "total_bolus", "delta_t", "premeal_bgl"];
    let changed: Vec<&str> = body["changed_features"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    assert!(changed.iter().all(|c| levers.contains(c)), "{changed:?}");
    assert_eq!(body["sparsity"], changed.len());
    let factual = sample_json(sample);
    for name in ["age", "sex", "ethnicity", "a1c", "mode", "total_basal", "premeal_slope"] {
        assert_eq!(body["cf"][name], factual[name], "{name}");
    }
    for lever in body["levers"].as_array().unwrap() {
        let v = body["cf"][lever["name"].as_str().unwrap()].as_f64().unwrap();
        assert!(lever["min"].as_f64().unwrap() <= v && v <= lever["max"].as_f64().unwrap());
    }
    let iterations = body["iterations"].as_u64().unwrap() as usize;
    assert_eq!(body["trajectory"].as_array().unwrap().len(), iterations);
    assert!(body["runtime_ms"].as_f64().unwrap() >= 0.0);
    if body["converged"] == true {
        assert!(body["cf_prediction"]["p_normoglycemia"].as_f64().unwrap() >= 0.6);
        assert!(body["narrative"].as_str().unwrap().starts_with("You can prevent hyperglycemia"));
    } else {
        assert!(body["narrative"].is_null());
    }
}

#[tokio::test]
async fn trajectory_can_be_omitted() {
    let mut req = cf_request(most_confident(Outcome::Hyperglycemia));
    req["trajectory"] = json!(false);
    let (status, body) = call(loaded_app(), Method::POST, "/counterfactual", Some(req)).await;
    assert_eq!(status, StatusCode::OK);
    assert!(body.get("trajectory").is_none());
}

#[tokio::test]
async fn zeroed_weights_are_echoed_and_drive_selection() {
    let mut req = cf_request(most_confident(Outcome::Hyperglycemia));
    req["w_user"] = json!({ "carb_size": 0.0 });
    req["w_physician"] = json!({ "carb_size": 0.0, "delta_t": 0.3 });
    let (status, body) = call(loaded_app(), Method::POST, "/counterfactual", Some(req)).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let levers = body["levers"].as_array().unwrap();
    let combined: Vec<f64> = levers.iter().map(|l| l["combined"].as_f64().unwrap()).collect();
    assert_eq!(combined, [0.0, 2.0, 1.3, 2.0]);

    let schema = default_schema();
    let lever_idx: Vec<usize> = levers
        .iter()
        .map(|l| schema.index_of(l["name"].as_str().unwrap()).unwrap())
        .collect();
    // Each trace records the mask after its step.
    let mut mask = vec![1u64; schema.len()];
    for step in body["trajectory"].as_array().unwrap() {
        let saliency: Vec<f64> = step["saliency"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
        let open: Vec<usize> = (0..lever_idx.len()).filter(|&k| mask[lever_idx[k]] == 1).collect();
        let max_s = open.iter().map(|&k| saliency[lever_idx[k]].abs()).fold(0.0, f64::max);
        let mut best: Option<(usize, f64)> = None;
        for &k in &open {
            let s = saliency[lever_idx[k]];
            if s == 0.0 {
                continue;
            }
            let score = s.abs() / max_s + combined[k];
            if best.map_or(true, |(_, b)| score > b) {
                best = Some((lever_idx[k], score));
            }
        }
        assert_eq!(step["chosen"].as_u64().map(|c| c as usize), best.map(|b| b.0), "{step}");
        mask = step["mask"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).collect();
    }
}

#[tokio::test]
async fn higher_gamma_needs_at_least_as_many_iterations() {
    let sample = most_confident(Outcome::Hyperglycemia);
    let mut iterations = Vec::new();
    for gamma in [0.6, 0.75] {
        let mut req = cf_request(sample);
        req["gamma"] = json!(gamma);
        let (status, body) = call(loaded_app(), Method::POST, "/counterfactual", Some(req)).await;
        assert_eq!(status, StatusCode::OK);
        assert_eq!(body["gamma"], gamma);
        iterations.push(body["iterations"].as_u64().unwrap());
    }
    assert!(iterations[1] >= iterations[0], "{iterations:?}");
}

#[tokio::test]
async fn trivial_samples_can_be_rejected() {
    let sample = most_confident(Outcome::Normoglycemia);
    let p = fixture().model.predict_proba(&sample.features()).unwrap()[0];
    assert!(p >= 0.5);
    let mut req = cf_request(sample);
    req["gamma"] = json!(0.5);
    let (status, body) = call(loaded_app(), Method::POST, "/counterfactual", Some(req.clone())).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!((body["iterations"].as_u64(), body["sparsity"].as_u64()), (Some(0), Some(0)));
    assert!(body["narrative"].as_str().unwrap().starts_with("No change needed"));

    req["reject_trivial"] = json!(true);
    let (status, body) = call(loaded_app(), Method::POST, "/counterfactual", Some(req)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["error"], "unprocessable");
}

#[tokio::test]
async fn invalid_counterfactual_requests_list_every_field() {
    let mut req = cf_request(&row_two());
    req["gamma"] = json!(1.2);
    req["w_user"] = json!({ "age": 0.5 });
    req["w_physician"] = json!({ "total_bolus": 3.0 });
    req["delta"] = json!({ "carb_size": -1.0 });
    let (status, body) = call(loaded_app(), Method::POST, "/counterfactual", Some(req)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let mut fields = field_names(&body);
    fields.sort();
    assert_eq!(fields, ["delta", "gamma", "w_physician", "w_user"]);

    let mut req = cf_request(&row_two());
    req["sample"]["premeal_bgl"] = json!(5.0);
    let (status, body) = call(loaded_app(), Method::POST, "/counterfactual", Some(req)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(field_names(&body), ["sample.premeal_bgl"]);

    let mut req = cf_request(&row_two());
    req["temperature"] = json!(1);
    let (status, body) = call(loaded_app(), Method::POST, "/counterfactual", Some(req)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(body["fields"][0]["message"].as_str().unwrap().contains("temperature"));
}

#[tokio::test]
async fn identical_requests_get_identical_bodies() {
    let req = cf_request(most_confident(Outcome::Hyperglycemia));
    let (_, mut a) = call(loaded_app(), Method::POST, "/counterfactual", Some(req.clone())).await;
    let (_, mut b) = call(loaded_app(), Method::POST, "/counterfactual", Some(req)).await;
    for body in [&mut a, &mut b] {
        body.as_object_mut().unwrap().remove("runtime_ms");
    }
    assert_eq!(a, b);
}

#[tokio::test]
async fn personal_bounds_apply_to_known_patients() {
    let known = most_confident(Outcome::Hyperglycemia);
    let (_, body) = call(loaded_app(), Method::POST, "/counterfactual", Some(cf_request(known))).await;
    assert_eq!(body["bounds"], "patient");
    let carb = &body["levers"][0];
    let own: Vec<f64> = fixture()
        .samples
        .iter()
        .filter(|s| s.patient_id == known.patient_id)
        .map(|s| s.carb_size)
        .collect();
    assert_eq!(carb["min"].as_f64(), Some(own.iter().copied().fold(f64::MAX, f64::min)));

    let mut stranger = known.clone();
    stranger.patient_id = "walk-in".into();
    let (_, body) = call(loaded_app(), Method::POST, "/counterfactual", Some(cf_request(&stranger))).await;
    assert_eq!(body["bounds"], "dataset");
    let all_min = fixture().samples.iter().map(|s| s.carb_size).fold(f64::MAX, f64::min);
    assert_eq!(body["levers"][0]["min"].as_f64(), Some(all_min));
}

#[tokio::test]
async fn cors_preflight_is_answered() {
    let req = Request::builder()
        .method(Method::OPTIONS)
        .uri("/counterfactual")
        .header(header::ORIGIN, "http://localhost:5173")
        .header(header::ACCESS_CONTROL_REQUEST_METHOD, "POST")
        .body(Body::empty())
        .unwrap();
    let resp = loaded_app().oneshot(req).await.unwrap();
    assert!(resp.status().is_success());
    assert!(resp.headers().contains_key(header::ACCESS_CONTROL_ALLOW_ORIGIN));
}

#[test]
fn service_config_parses_and_rejects_unknown_keys() {
    let cfg: ServiceConfig = toml::from_str("bind = \"0.0.0.0:9000\"\ngamma = 0.7\n").unwrap();
    assert_eq!(cfg.bind, "0.0.0.0:9000");
    assert_eq!(cfg.max_iter, 200);
    assert!(toml::from_str::<ServiceConfig>("port = 9000\n").is_err());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("service.toml");
    std::fs::write(&path, "gamma = 0.65\n").unwrap();
    assert_eq!(ServiceConfig::load(&path).unwrap().gamma, 0.65);
}
