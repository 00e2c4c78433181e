//! HTTP/JSON facade over a trained classifier and the counterfactual engine.
//!
//! | method | path               | body                         |
//! |--------|--------------------|------------------------------|
//! | POST   | `/predict`         | [`SampleInput`]              |
//! | POST   | `/counterfactual`  | [`CfRequest`]                |
//! | GET    | `/schema`          |                              |
//! | GET    | `/dataset/summary` |                              |
//! | GET    | `/health`          |                              |
//!
//! The model and dataset are loaded once at startup and shared read-only.
//! Without them every model-backed endpoint answers 503.

mod api;
mod config;
mod error;

pub use api::*;
pub use config::{ConfigError, ServiceConfig, CONFIG_ENV};
pub use error::ApiError;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{HeaderValue, Method};
use axum::routing::{get, post};
use axum::{Json, Router};
use glytwin_core::domain::{
    default_schema, read_samples, DomainError, FactualSample, FeatureSchema, FieldError, Outcome,
    PreferenceWeights,
};
use glytwin_core::engine::{generate_counterfactual, CfParams};
use glytwin_core::harness::narrate;
use glytwin_core::metrics;
use glytwin_core::models::{feature_ranges, ModelError, Predictor, TrainedModel};
use serde::de::DeserializeOwned;
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;
use tower_http::cors::{AllowOrigin, CorsLayer};

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("model: {0}")]
    Model(#[from] ModelError),
    #[error("dataset: {0}")]
    Dataset(#[from] DomainError),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid CORS origin {0:?}")]
    Cors(String),
}

/// Model, dataset and everything derived from them.
pub struct Loaded {
    pub model: TrainedModel,
    pub model_sha256: String,
    pub samples: Vec<FactualSample>,
    pub dataset_sha256: String,
    /// Default schema with dataset-wide lever boxes.
    pub schema: FeatureSchema,
    /// Per-feature ranges normalizing proximity.
    pub ranges: Vec<f64>,
}

impl Loaded {
    pub fn new(
        model: TrainedModel,
        model_sha256: String,
        samples: Vec<FactualSample>,
        dataset_sha256: String,
    ) -> Result<Self, ServiceError> {
        if samples.is_empty() {
            return Err(ServiceError::EmptyDataset);
        }
        let schema = default_schema().with_observed_bounds(&samples);
        let ranges = feature_ranges(&samples.iter().map(|s| s.features()).collect::<Vec<_>>());
        Ok(Self {
            model,
            model_sha256,
            samples,
            dataset_sha256,
            schema,
            ranges,
        })
    }

    pub fn from_files(model_path: &Path, dataset_path: &Path) -> Result<Self, ServiceError> {
        let read = |path: &Path| {
            std::fs::read(path).map_err(|source| ServiceError::Io {
                path: path.to_path_buf(),
                source,
            })
        };
        let model_bytes = read(model_path)?;
        let model = TrainedModel::from_json(&String::from_utf8_lossy(&model_bytes))?;
        let data_bytes = read(dataset_path)?;
        let samples = read_samples(data_bytes.as_slice())?;
        Self::new(model, sha256_hex(&model_bytes), samples, sha256_hex(&data_bytes))
    }

    /// Lever boxes from the patient's own history when it has enough
    /// samples, otherwise from the whole dataset.
    fn schema_for(&self, patient_id: &str) -> (FeatureSchema, BoundsScope) {
        match self.schema.personalize_bounds(&self.samples, patient_id) {
            Ok(own) => (self.schema.with_lever_bounds_from(&own), BoundsScope::Patient),
            Err(_) => (self.schema.clone(), BoundsScope::Dataset),
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub struct AppState {
    pub loaded: Option<Loaded>,
    pub config: ServiceConfig,
}

impl AppState {
    pub fn new(loaded: Option<Loaded>, config: ServiceConfig) -> Self {
        Self { loaded, config }
    }

    /// Loads model and dataset from the configured paths. A load failure is
    /// logged and leaves the service up without a model.
    pub fn load(config: ServiceConfig) -> Self {
        let loaded = match Loaded::from_files(&config.model_path, &config.dataset_path) {
            Ok(l) => Some(l),
            Err(e) => {
                tracing::error!(error = %e, "starting without a model");
                None
            }
        };
        Self { loaded, config }
    }

    fn loaded(&self) -> Result<&Loaded, ApiError> {
        self.loaded.as_ref().ok_or(ApiError::Unavailable)
    }
}

type Shared = Arc<AppState>;

pub fn cors_layer(origins: &[String]) -> Result<CorsLayer, ServiceError> {
    let allow = if origins.is_empty() {
        AllowOrigin::any()
    } else {
        let values = origins
            .iter()
            .map(|o| HeaderValue::from_str(o).map_err(|_| ServiceError::Cors(o.clone())))
            .collect::<Result<Vec<_>, _>>()?;
        AllowOrigin::list(values)
    };
    Ok(CorsLayer::new()
        .allow_origin(allow)
        .allow_methods([Method::GET, Method::POST])
        .allow_headers([axum::http::header::CONTENT_TYPE]))
}

pub fn router(state: AppState) -> Result<Router, ServiceError> {
    let cors = cors_layer(&state.config.cors_origins)?;
    Ok(Router::new()
        .route("/predict", post(predict))
        .route("/counterfactual", post(counterfactual))
        .route("/schema", get(schema))
        .route("/dataset/summary", get(dataset_summary))
        .route("/health", get(health))
        .layer(cors)
        .with_state(Arc::new(state)))
}

/// Binds the configured address and serves until Ctrl-C.
pub async fn serve(config: ServiceConfig) -> Result<(), ServiceError> {
    let bind = config.bind.clone();
    let app = router(AppState::load(config))?;
    let io = |source| ServiceError::Io {
        path: PathBuf::from(&bind),
        source,
    };
    let listener = tokio::net::TcpListener::bind(&bind).await.map_err(io)?;
    tracing::info!(%bind, "listening");
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(io)
}

/// JSON body parser that reports the offending field path as a 400.
fn parse<T: DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    let de = &mut serde_json::Deserializer::from_slice(body);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let field = if path == "." { "body".to_string() } else { path };
        ApiError::field(field, e.into_inner().to_string())
    })
}

fn validate_sample(input: &SampleInput, prefix: &str) -> Result<FactualSample, ApiError> {
    let sample = input.to_sample();
    match sample.validate() {
        Ok(()) => Ok(sample),
        Err(DomainError::InvalidSample(fields)) => Err(ApiError::BadRequest(
            fields
                .into_iter()
                .map(|f| FieldError::new(format!("{prefix}{}", f.field), f.message))
                .collect(),
        )),
        Err(e) => Err(e.into()),
    }
}

fn proba(model: &TrainedModel, x: &[f64]) -> Result<[f64; 2], ApiError> {
    model.predict_proba(x).map_err(|e| ApiError::internal(&e))
}

async fn predict(State(state): State<Shared>, body: Bytes) -> Result<Json<Prediction>, ApiError> {
    let loaded = state.loaded()?;
    let input: SampleInput = parse(&body)?;
    let sample = validate_sample(&input, "")?;
    Ok(Json(Prediction::from_proba(proba(&loaded.model, &sample.features())?)))
}

fn cf_params(loaded: &Loaded, config: &ServiceConfig, req: &CfRequest) -> Result<(CfParams, BoundsScope), ApiError> {
    let mut errors = Vec::new();
    let (schema, scope) = loaded.schema_for(&req.sample.patient_id);
    let schema = match schema.with_steps(&req.delta) {
        Ok(s) => s,
        Err(e) => {
            errors.push(FieldError::new("delta", e.to_string()));
            schema
        }
    };
    let empty = BTreeMap::new();
    let mut weights_for = |field: &str, user: &BTreeMap<String, f64>, physician: &BTreeMap<String, f64>| {
        PreferenceWeights::from_named(&schema, user, physician, 1.0)
            .map_err(|e| errors.push(FieldError::new(field, e.to_string())))
            .ok()
    };
    let user = weights_for("w_user", &req.w_user, &empty);
    let physician = weights_for("w_physician", &empty, &req.w_physician);
    let weights = match (user, physician) {
        (Some(u), Some(p)) => PreferenceWeights {
            user: u.user,
            physician: p.physician,
        },
        _ => PreferenceWeights::uniform(schema.len(), 1.0),
    };
    let params = CfParams {
        gamma: req.gamma.unwrap_or(config.gamma),
        max_iter: req.max_iter.unwrap_or(config.max_iter),
        ..CfParams::new(schema, weights)
    };
    if !(params.gamma >= 0.5 && params.gamma < 1.0) {
        errors.push(FieldError::new("gamma", "must be in [0.5, 1)"));
    }
    if params.max_iter == 0 {
        errors.push(FieldError::new("max_iter", "must be at least 1"));
    }
    if errors.is_empty() {
        params.validate().map_err(|e| ApiError::field("body", e.to_string()))?;
        Ok((params, scope))
    } else {
        Err(ApiError::BadRequest(errors))
    }
}

async fn counterfactual(State(state): State<Shared>, body: Bytes) -> Result<Json<CfResponse>, ApiError> {
    state.loaded()?;
    let req: CfRequest = parse(&body)?;
    let state = Arc::clone(&state);
    tokio::task::spawn_blocking(move || run_counterfactual(&state, &req))
        .await
        .map_err(|e| ApiError::internal(&e))?
        .map(Json)
}

/// Validates, searches, revalidates and packages one request.
pub fn run_counterfactual(state: &AppState, req: &CfRequest) -> Result<CfResponse, ApiError> {
    let loaded = state.loaded()?;
    let sample = validate_sample(&req.sample, "sample.")?;
    let (params, scope) = cf_params(loaded, &state.config, req)?;
    let x = sample.features();
    let before = proba(&loaded.model, &x)?;
    if req.reject_trivial && before[Outcome::Normoglycemia.class_index()] >= params.gamma {
        return Err(ApiError::Unprocessable(format!(
            "sample already meets gamma = {}: p_normoglycemia = {:.4}",
            params.gamma,
            before[Outcome::Normoglycemia.class_index()]
        )));
    }

    let t = Instant::now();
    let result = generate_counterfactual(&loaded.model, &x, &params).map_err(|e| ApiError::internal(&e))?;
    let runtime_ms = t.elapsed().as_secs_f64() * 1e3;
    result.check_invariants(&params).map_err(|m| ApiError::Internal {
        message: "counterfactual failed revalidation".into(),
        context: vec![m],
    })?;

    let schema = &params.schema;
    let changed = result.changed_features();
    let violations = changed.iter().filter(|&&i| !schema.is_modifiable(i)).count();
    if violations > 0 {
        return Err(ApiError::Internal {
            message: "counterfactual changed a fixed feature".into(),
            context: changed.iter().map(|&i| schema.features[i].name.clone()).collect(),
        });
    }
    let proximity = metrics::proximity(&result.counterfactual, &x, &loaded.ranges, schema)
        .map_err(|e| ApiError::internal(&e))?;
    let after = proba(&loaded.model, &result.counterfactual)?;
    let cf_prediction = Prediction::from_proba(after);
    let cf_sample = result.counterfactual_sample(&sample).map_err(|e| ApiError::internal(&e))?;
    let narrative = result.converged.then(|| narrate(schema, &result).ok()).flatten();

    Ok(CfResponse {
        cf: SampleInput::from_sample(&cf_sample, Some(cf_prediction.predicted_class), req.sample.meal_timestamp),
        factual_prediction: Prediction::from_proba(before),
        cf_prediction,
        converged: result.converged,
        stop_reason: result.stop_reason,
        iterations: result.iterations,
        gamma: params.gamma,
        changed_features: changed.iter().map(|&i| schema.features[i].name.clone()).collect(),
        proximity,
        sparsity: changed.len(),
        violations,
        bounds: scope,
        levers: schema
            .modifiable_indices()
            .into_iter()
            .map(|i| LeverSettings::new(&schema.features[i], &params.weights, i))
            .collect(),
        trajectory: req.trajectory.then(|| result.trajectory.clone()),
        narrative,
        runtime_ms,
    })
}

async fn schema(State(state): State<Shared>) -> Json<SchemaResponse> {
    let schema = state
        .loaded
        .as_ref()
        .map(|l| l.schema.clone())
        .unwrap_or_else(default_schema);
    Json(SchemaResponse {
        schema_version: 1,
        modifiable: schema
            .modifiable_indices()
            .into_iter()
            .map(|i| schema.features[i].name.clone())
            .collect(),
        features: schema.features,
        default_gamma: state.config.gamma,
        default_max_iter: state.config.max_iter,
    })
}

async fn dataset_summary(State(state): State<Shared>) -> Result<Json<DatasetSummary>, ApiError> {
    let loaded = state.loaded()?;
    let hyper = loaded
        .samples
        .iter()
        .filter(|s| s.outcome == Outcome::Hyperglycemia)
        .count();
    let n = loaded.samples.len();
    let patients: BTreeSet<&str> = loaded.samples.iter().map(|s| s.patient_id.as_str()).collect();
    let rows: Vec<Vec<f64>> = loaded.samples.iter().map(|s| s.features()).collect();
    let features = loaded
        .schema
        .features
        .iter()
        .enumerate()
        .map(|(j, f)| FeatureRange {
            name: f.name.clone(),
            min: rows.iter().map(|r| r[j]).fold(f64::INFINITY, f64::min),
            max: rows.iter().map(|r| r[j]).fold(f64::NEG_INFINITY, f64::max),
        })
        .collect();
    Ok(Json(DatasetSummary {
        n_samples: n,
        n_patients: patients.len(),
        class_balance: ClassBalance {
            normoglycemia: n - hyper,
            hyperglycemia: hyper,
            hyperglycemic_fraction: hyper as f64 / n as f64,
        },
        features,
    }))
}

async fn health(State(state): State<Shared>) -> Json<Health> {
    Json(Health {
        status: if state.loaded.is_some() { "ok" } else { "model_not_loaded" }.into(),
        version: env!("CARGO_PKG_VERSION").into(),
        model: state.loaded.as_ref().map(|l| ModelInfo {
            kind: l.model.kind().into(),
            sha256: l.model_sha256.clone(),
            accuracy: l.model.report.accuracy,
        }),
        dataset_sha256: state.loaded.as_ref().map(|l| l.dataset_sha256.clone()),
    })
}
