//! Trainable predictors and the opaque [`Predictor`] contract the engine
//! consumes.
//!
//! Models are trained on encoded features (see [`Encoder`]) but every
//! [`Predictor`] accepts raw feature vectors, so the engine can keep steps
//! and bounds in human units. [`TrainedModel`] bundles a fitted encoder
//! with either network or tree-ensemble weights and is what gets persisted.

mod gbt;
mod knn;
mod mlp;

pub use gbt::{Gbt, GbtSpec};
pub use knn::{feature_ranges, knn_vote, mixed_distance, KnnIndex};
pub use mlp::{Mlp, MlpSpec};

use crate::domain::{DomainError, Encoder, FactualSample, FeatureSchema, Outcome};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("degenerate training data: {0}")]
    DegenerateData(String),
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("empty training set")]
    EmptyTrainingSet,
    #[error("invalid k = {k} for {n} training samples (k must be odd and at most n)")]
    InvalidK { k: usize, n: usize },
    #[error("unsupported model file: {0}")]
    UnsupportedFormat(String),
    #[error("predictor produced an invalid distribution {0:?}")]
    InvalidOutput([f64; 2]),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A binary classifier over raw feature vectors.
///
/// Returns `[p_normoglycemia, p_hyperglycemia]`: non-negative, summing to 1.
/// Implementations must be deterministic and side-effect free.
pub trait Predictor: Send + Sync {
    fn predict_proba(&self, x: &[f64]) -> Result<[f64; 2], ModelError>;

    fn predict_class(&self, x: &[f64]) -> Result<Outcome, ModelError> {
        let p = self.predict_proba(x)?;
        Ok(if p[1] > p[0] {
            Outcome::Hyperglycemia
        } else {
            Outcome::Normoglycemia
        })
    }
}

impl<P: Predictor + ?Sized> Predictor for &P {
    fn predict_proba(&self, x: &[f64]) -> Result<[f64; 2], ModelError> {
        (**self).predict_proba(x)
    }
}

/// Wraps a closure returning the hyperglycemia probability.
pub struct FnPredictor<F>(pub F);

impl<F> Predictor for FnPredictor<F>
where
    F: Fn(&[f64]) -> f64 + Send + Sync,
{
    fn predict_proba(&self, x: &[f64]) -> Result<[f64; 2], ModelError> {
        let p = (self.0)(x);
        if !(0.0..=1.0).contains(&p) {
            return Err(ModelError::InvalidOutput([1.0 - p, p]));
        }
        Ok([1.0 - p, p])
    }
}

/// Index partition used for every train/test split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataSplit {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffles `0..n` with `seed` and puts the first `train_fraction` in train.
/// Both index lists come back sorted.
pub fn split_indices(n: usize, train_fraction: f64, seed: u64) -> DataSplit {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((n as f64) * train_fraction).round() as usize;
    let (a, b) = idx.split_at(n_train.min(n));
    let mut train = a.to_vec();
    let mut test = b.to_vec();
    train.sort_unstable();
    test.sort_unstable();
    DataSplit { train, test }
}

/// Held-out quality of a trained model. Hyperglycemia is the positive class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub n_train: usize,
    pub n_test: usize,
    pub accuracy: f64,
    pub f1: f64,
    /// Mean training loss per epoch (network) or per boosting round (trees).
    pub loss_history: Vec<f64>,
}

pub fn accuracy_and_f1(truth: &[Outcome], predicted: &[Outcome]) -> (f64, f64) {
    let n = truth.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let (mut tp, mut fp, mut fneg, mut correct) = (0usize, 0usize, 0usize, 0usize);
    for (t, p) in truth.iter().zip(predicted) {
        correct += (t == p) as usize;
        match (t, p) {
            (Outcome::Hyperglycemia, Outcome::Hyperglycemia) => tp += 1,
            (Outcome::Normoglycemia, Outcome::Hyperglycemia) => fp += 1,
            (Outcome::Hyperglycemia, Outcome::Normoglycemia) => fneg += 1,
            _ => {}
        }
    }
    let f1 = if tp == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fneg) as f64
    };
    (correct as f64 / n as f64, f1)
}

pub const MODEL_FORMAT: &str = "glytwin-model";
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelBody {
    Mlp(Mlp),
    Gbt(Gbt),
}

/// A fitted encoder plus model weights; the unit of persistence.
///
/// Stored as pretty-printed JSON:
///
/// | field      | content                                                 |
/// |------------|---------------------------------------------------------|
/// | `format`   | always `"glytwin-model"`                                |
/// | `version`  | file format version, currently 1                        |
/// | `schema`   | feature schema the model was trained against            |
/// | `encoder`  | per-column z-score parameters or one-hot level counts   |
/// | `body`     | `{"kind": "mlp" \| "gbt", ...}` spec and weights/trees  |
/// | `report`   | held-out accuracy, F1 and the training loss curve       |
///
/// Floats round-trip exactly, so identical bytes give identical predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainedModel {
    pub format: String,
    pub version: u32,
    pub schema: FeatureSchema,
    pub encoder: Encoder,
    pub body: ModelBody,
    pub report: TrainReport,
}

impl TrainedModel {
    fn new(schema: &FeatureSchema, encoder: Encoder, body: ModelBody, report: TrainReport) -> Self {
        Self {
            format: MODEL_FORMAT.to_string(),
            version: MODEL_FORMAT_VERSION,
            schema: schema.clone(),
            encoder,
            body,
            report,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self.body {
            ModelBody::Mlp(_) => "mlp",
            ModelBody::Gbt(_) => "gbt",
        }
    }

    pub fn to_json(&self) -> Result<String, ModelError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        #[derive(Deserialize)]
        struct Header {
            format: String,
            version: u32,
        }
        let header: Header = serde_json::from_str(text)?;
        if header.format != MODEL_FORMAT {
            return Err(ModelError::UnsupportedFormat(format!(
                "format {:?}, expected {MODEL_FORMAT:?}",
                header.format
            )));
        }
        if header.version != MODEL_FORMAT_VERSION {
            return Err(ModelError::UnsupportedFormat(format!(
                "version {}, expected {MODEL_FORMAT_VERSION}",
                header.version
            )));
        }
        let model: TrainedModel = serde_json::from_str(text)?;
        if model.encoder.raw_len() != model.schema.len() {
            return Err(ModelError::UnsupportedFormat(
                "encoder and schema disagree on feature count".into(),
            ));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

impl Predictor for TrainedModel {
    fn predict_proba(&self, x: &[f64]) -> Result<[f64; 2], ModelError> {
        let e = self.encoder.encode(x)?;
        Ok(match &self.body {
            ModelBody::Mlp(m) => m.predict_encoded(e.as_slice()),
            ModelBody::Gbt(g) => g.predict_encoded(e.as_slice()),
        })
    }
}

/// Raw features and labels for the given sample indices.
fn rows_and_labels(samples: &[FactualSample], idx: &[usize]) -> (Vec<Vec<f64>>, Vec<Outcome>) {
    idx.iter()
        .map(|&i| (samples[i].features(), samples[i].outcome))
        .unzip()
}

fn check_trainable(samples: &[FactualSample], min: usize) -> Result<(), ModelError> {
    if samples.len() < min {
        return Err(ModelError::DegenerateData(format!(
            "{} samples, at least {min} required",
            samples.len()
        )));
    }
    let hyper = samples
        .iter()
        .filter(|s| s.outcome == Outcome::Hyperglycemia)
        .count();
    if hyper == 0 || hyper == samples.len() {
        return Err(ModelError::DegenerateData("only one class present".into()));
    }
    Ok(())
}

/// Fewest samples accepted by the training entry points.
pub const MIN_TRAINING_SAMPLES: usize = 200;

struct Prepared {
    encoder: Encoder,
    x_train: Vec<Vec<f64>>,
    y_train: Vec<Outcome>,
    x_test: Vec<Vec<f64>>,
    y_test: Vec<Outcome>,
}

fn prepare(
    samples: &[FactualSample],
    schema: &FeatureSchema,
    split: &DataSplit,
) -> Result<Prepared, ModelError> {
    let (raw_train, y_train) = rows_and_labels(samples, &split.train);
    let (raw_test, y_test) = rows_and_labels(samples, &split.test);
    if !y_train.contains(&Outcome::Hyperglycemia) || !y_train.contains(&Outcome::Normoglycemia) {
        return Err(ModelError::DegenerateData(
            "training split contains only one class".into(),
        ));
    }
    let encoder = Encoder::fit(schema, &raw_train)?;
    let enc = |rows: &[Vec<f64>]| -> Result<Vec<Vec<f64>>, ModelError> {
        rows.iter().map(|r| Ok(encoder.encode(r)?.0)).collect()
    };
    Ok(Prepared {
        x_train: enc(&raw_train)?,
        x_test: enc(&raw_test)?,
        encoder,
        y_train,
        y_test,
    })
}

fn held_out(y_test: &[Outcome], predict: impl Fn(&[f64]) -> [f64; 2], x_test: &[Vec<f64>]) -> (f64, f64) {
    let predicted: Vec<Outcome> = x_test
        .iter()
        .map(|x| {
            if predict(x)[1] > 0.5 {
                Outcome::Hyperglycemia
            } else {
                Outcome::Normoglycemia
            }
        })
        .collect();
    accuracy_and_f1(y_test, &predicted)
}

/// Trains the dense classifier on the `spec.train_fraction` split drawn with
/// `seed` and reports accuracy on the remainder.
pub fn train_mlp(
    samples: &[FactualSample],
    schema: &FeatureSchema,
    spec: &MlpSpec,
    seed: u64,
) -> Result<TrainedModel, ModelError> {
    spec.validate()?;
    check_trainable(samples, MIN_TRAINING_SAMPLES)?;
    let split = split_indices(samples.len(), spec.train_fraction, seed);
    let p = prepare(samples, schema, &split)?;
    let (mlp, loss_history) = Mlp::fit(&p.x_train, &p.y_train, spec, seed)?;
    let (accuracy, f1) = held_out(&p.y_test, |x| mlp.predict_encoded(x), &p.x_test);
    let report = TrainReport {
        n_train: p.x_train.len(),
        n_test: p.x_test.len(),
        accuracy,
        f1,
        loss_history,
    };
    Ok(TrainedModel::new(schema, p.encoder, ModelBody::Mlp(mlp), report))
}

/// Trains the gradient-boosted tree simulator used for validity checks.
pub fn train_simulator(
    samples: &[FactualSample],
    schema: &FeatureSchema,
    spec: &GbtSpec,
    seed: u64,
) -> Result<TrainedModel, ModelError> {
    spec.validate()?;
    check_trainable(samples, MIN_TRAINING_SAMPLES)?;
    let split = split_indices(samples.len(), spec.train_fraction, seed);
    let p = prepare(samples, schema, &split)?;
    let (gbt, loss_history) = Gbt::fit(&p.x_train, &p.y_train, spec)?;
    let (accuracy, f1) = held_out(&p.y_test, |x| gbt.predict_encoded(x), &p.x_test);
    let report = TrainReport {
        n_train: p.x_train.len(),
        n_test: p.x_test.len(),
        accuracy,
        f1,
        loss_history,
    };
    Ok(TrainedModel::new(schema, p.encoder, ModelBody::Gbt(gbt), report))
}

/// Logistic sigmoid, stable for large |z|.
pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
