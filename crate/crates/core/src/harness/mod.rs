//! End-to-end experiments: synthetic cohort, dataset, models, counterfactual
//! batches, metrics and sweeps, all driven by one [`ExperimentConfig`].
//!
//! Report files are deterministic functions of the config. Wall-clock
//! measurements go to a separate `timing.json` next to them.

mod artifacts;
mod evaluation;
mod report;
mod sweeps;

pub use artifacts::{
    config_fingerprint, load_experiment, run_generate, run_ingest, run_subgroups, run_synth, run_train, Artifacts,
    GeneratedCf, IngestSummary, Manifest, SynthSummary,
};
pub use evaluation::{run_evaluation, CfRecord, EvaluationReport, ModelSummary};
pub use report::{narrate, runtime_report, subgroup_report, RuntimeGroup, RuntimeReport, SubgroupRow};
pub use sweeps::{ablate_delta, ablate_gamma, DeltaRow, DeltaSweep, GammaRow, GammaSweep};

use crate::domain::{default_schema, FactualSample, FeatureSchema, Outcome, PatientProfile, PreferenceWeights};
use crate::engine::{generate_counterfactual, CfParams, CounterfactualResult};
use crate::metrics::MetricInputs;
use crate::models::{
    feature_ranges, split_indices, train_mlp, train_simulator, DataSplit, GbtSpec, KnnIndex, MlpSpec, Predictor,
    TrainedModel,
};
use crate::pipeline::build_dataset;
use crate::synthgen::{generate_cohort, SynthConfig};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
    #[error("counterfactual did not converge")]
    NotConverged,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),
    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl HarnessError {
    /// Short machine-readable kind for error records.
    pub fn kind(&self) -> &'static str {
        match self {
            HarnessError::Config(_) => "config",
            HarnessError::Stage { stage, .. } => stage,
            HarnessError::NotConverged => "not_converged",
            HarnessError::Io { .. } => "io",
            HarnessError::TomlDe(_) | HarnessError::TomlSer(_) => "toml",
            HarnessError::Json(_) => "json",
        }
    }
}

pub(crate) fn stage<E>(stage: &'static str) -> impl FnOnce(E) -> HarnessError
where
    E: std::error::Error + Send + Sync + 'static,
{
    move |e| HarnessError::Stage { stage, source: Box::new(e) }
}

/// Counterfactual search settings. Weights are keyed by lever name; levers
/// missing from a map get 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CfConfig {
    pub gamma: f64,
    pub max_iter: usize,
    pub plateau_eps: f64,
    pub plateau_patience: usize,
    pub user_weights: BTreeMap<String, f64>,
    pub physician_weights: BTreeMap<String, f64>,
    /// Step overrides by lever name, in the lever's units.
    pub steps: BTreeMap<String, f64>,
    /// Box per-patient levers to each patient's own history when it has
    /// enough samples; otherwise (or when false) to the whole dataset.
    pub personalize_bounds: bool,
}

impl Default for CfConfig {
    fn default() -> Self {
        Self {
            gamma: 0.6,
            max_iter: 200,
            plateau_eps: 1e-6,
            plateau_patience: 10,
            user_weights: BTreeMap::new(),
            physician_weights: BTreeMap::new(),
            steps: BTreeMap::new(),
            personalize_bounds: true,
        }
    }
}

/// Weights for the preference-alignment run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignmentConfig {
    pub user_weights: BTreeMap<String, f64>,
    pub physician_weights: BTreeMap<String, f64>,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        let named = |v: [f64; 4]| -> BTreeMap<String, f64> {
            ["carb_size", "total_bolus", "delta_t", "premeal_bgl"]
                .into_iter()
                .zip(v)
                .map(|(k, w)| (k.to_string(), w))
                .collect()
        };
        Self {
            user_weights: named([0.1, 1.0, 1.0, 0.7]),
            physician_weights: named([0.0, 0.9, 0.9, 0.0]),
        }
    }
}

/// Bin edges for subgroup reporting. A value `v` falls in the bin
/// `[e_k, e_{k+1})`; values below the first edge or at/above the last get
/// open-ended bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SubgroupBins {
    pub age: Vec<f64>,
    pub a1c: Vec<f64>,
    pub years_from_diagnosis: Vec<f64>,
}

impl Default for SubgroupBins {
    fn default() -> Self {
        Self {
            age: vec![30.0, 40.0, 50.0, 60.0, 70.0],
            a1c: vec![6.0, 6.5, 7.0, 7.5],
            years_from_diagnosis: vec![10.0, 20.0, 30.0, 40.0, 50.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Seed for the train/test split and model initialization.
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Neighbors consulted by the NN test.
    pub nn_k: usize,
    pub gamma_grid: Vec<f64>,
    /// Step sizes as fractions of each lever's range.
    pub delta_grid: Vec<f64>,
    pub synth: SynthConfig,
    pub mlp: MlpSpec,
    pub gbt: GbtSpec,
    pub cf: CfConfig,
    pub alignment: AlignmentConfig,
    pub bins: SubgroupBins,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 8,
            out_dir: PathBuf::from("glytwin-out"),
            nn_k: 5,
            gamma_grid: vec![0.50, 0.55, 0.60, 0.65, 0.70, 0.75],
            delta_grid: vec![0.05, 0.10, 0.15, 0.20, 0.25],
            synth: SynthConfig::default(),
            mlp: MlpSpec::default(),
            gbt: GbtSpec::default(),
            cf: CfConfig::default(),
            alignment: AlignmentConfig::default(),
            bins: SubgroupBins::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String, HarnessError> {
        Ok(toml::to_string(self)?)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        Self::from_toml(&read_text(path)?)
    }

    /// Uses `seed` for both the cohort and the models.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.synth.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.gamma_grid.is_empty() || self.delta_grid.is_empty() {
            return bad("gamma_grid and delta_grid must be non-empty".into());
        }
        if let Some(g) = self.gamma_grid.iter().find(|g| !(**g >= 0.5 && **g < 1.0)) {
            return bad(format!("gamma {g} in gamma_grid is outside [0.5, 1)"));
        }
        if let Some(d) = self.delta_grid.iter().find(|d| !(**d > 0.0 && **d <= 1.0)) {
            return bad(format!("delta fraction {d} is outside (0, 1]"));
        }
        if self.nn_k == 0 || self.nn_k % 2 == 0 {
            return bad(format!("nn_k = {} must be odd", self.nn_k));
        }
        for (name, edges) in [
            ("age", &self.bins.age),
            ("a1c", &self.bins.a1c),
            ("years_from_diagnosis", &self.bins.years_from_diagnosis),
        ] {
            if edges.windows(2).any(|w| !(w[0] < w[1])) {
                return bad(format!("{name} bin edges must be strictly increasing"));
            }
        }
        self.synth.validate().map_err(stage("config"))?;
        self.mlp.validate().map_err(stage("config"))?;
        self.gbt.validate().map_err(stage("config"))?;
        let schema = default_schema().with_steps(&self.cf.steps).map_err(stage("config"))?;
        let params = CfParams {
            gamma: self.cf.gamma,
            max_iter: self.cf.max_iter,
            plateau_eps: self.cf.plateau_eps,
            plateau_patience: self.cf.plateau_patience,
            ..CfParams::new(schema.clone(), self.weights(&schema)?)
        };
        params.validate().map_err(stage("config"))?;
        self.alignment_weights(&schema)?;
        Ok(())
    }

    pub fn weights(&self, schema: &FeatureSchema) -> Result<PreferenceWeights, HarnessError> {
        PreferenceWeights::from_named(schema, &self.cf.user_weights, &self.cf.physician_weights, 1.0)
            .map_err(stage("config"))
    }

    pub fn alignment_weights(&self, schema: &FeatureSchema) -> Result<PreferenceWeights, HarnessError> {
        PreferenceWeights::from_named(
            schema,
            &self.alignment.user_weights,
            &self.alignment.physician_weights,
            1.0,
        )
        .map_err(stage("config"))
    }
}

pub(crate) fn read_text(path: &Path) -> Result<String, HarnessError> {
    std::fs::read_to_string(path).map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<(), HarnessError> {
    let io = |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io)?;
    }
    std::fs::write(path, text).map_err(io)
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), HarnessError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

/// A trained setup shared by every experiment: dataset, split, both models
/// and the counterfactual pool.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub samples: Vec<FactualSample>,
    pub profiles: Vec<PatientProfile>,
    pub n_skipped: usize,
    pub classifier: TrainedModel,
    pub simulator: TrainedModel,
    pub split: DataSplit,
    /// Held-out sample indices the classifier predicts hyperglycemic.
    pub pool: Vec<usize>,
    /// Training-split neighbors for the NN test and the NICE baseline.
    pub train_index: KnnIndex,
    /// Training-split ranges normalizing proximity.
    pub train_ranges: Vec<f64>,
    /// Every sample's raw features; their box defines plausibility.
    pub all_rows: Vec<Vec<f64>>,
    /// Default schema with configured steps and dataset-wide lever boxes.
    pub dataset_schema: FeatureSchema,
    patient_schemas: BTreeMap<String, FeatureSchema>,
    pub weights: PreferenceWeights,
    /// Wall time per preparation stage, seconds.
    pub timings: BTreeMap<String, f64>,
}

impl Experiment {
    /// Synthesizes the cohort, builds the dataset and trains both models.
    pub fn prepare(config: &ExperimentConfig) -> Result<Self, HarnessError> {
        config.validate()?;
        let t = Instant::now();
        let (streams, profiles) = generate_cohort(&config.synth).map_err(stage("synth"))?;
        let synth_s = t.elapsed().as_secs_f64();
        let t = Instant::now();
        let build = build_dataset(&streams, &profiles).map_err(stage("ingest"))?;
        let ingest_s = t.elapsed().as_secs_f64();
        let mut exp = Self::train(config, build.samples, profiles, build.skipped.len())?;
        exp.timings.insert("synth".into(), synth_s);
        exp.timings.insert("ingest".into(), ingest_s);
        Ok(exp)
    }

    /// Trains both models on an existing dataset.
    pub fn train(
        config: &ExperimentConfig,
        samples: Vec<FactualSample>,
        profiles: Vec<PatientProfile>,
        n_skipped: usize,
    ) -> Result<Self, HarnessError> {
        let schema = default_schema();
        let t = Instant::now();
        let classifier = train_mlp(&samples, &schema, &config.mlp, config.seed).map_err(stage("train_classifier"))?;
        let mlp_s = t.elapsed().as_secs_f64();
        let t = Instant::now();
        let simulator =
            train_simulator(&samples, &schema, &config.gbt, config.seed).map_err(stage("train_simulator"))?;
        let gbt_s = t.elapsed().as_secs_f64();
        let mut exp = Self::from_models(config, samples, profiles, n_skipped, classifier, simulator)?;
        exp.timings.insert("train_classifier".into(), mlp_s);
        exp.timings.insert("train_simulator".into(), gbt_s);
        Ok(exp)
    }

    /// Assembles an experiment around already trained models. The split is
    /// recomputed from the config seed, as during training.
    pub fn from_models(
        config: &ExperimentConfig,
        samples: Vec<FactualSample>,
        profiles: Vec<PatientProfile>,
        n_skipped: usize,
        classifier: TrainedModel,
        simulator: TrainedModel,
    ) -> Result<Self, HarnessError> {
        config.validate()?;
        let split = split_indices(samples.len(), config.mlp.train_fraction, config.seed);
        let train: Vec<FactualSample> = split.train.iter().map(|&i| samples[i].clone()).collect();
        let train_index = KnnIndex::new(&classifier.schema, &train).map_err(stage("reference"))?;
        let train_ranges = feature_ranges(&train.iter().map(|s| s.features()).collect::<Vec<_>>());
        let all_rows: Vec<Vec<f64>> = samples.iter().map(|s| s.features()).collect();

        let base = default_schema().with_steps(&config.cf.steps).map_err(stage("config"))?;
        let dataset_schema = base.with_observed_bounds(&samples);
        let mut patient_schemas = BTreeMap::new();
        if config.cf.personalize_bounds {
            for s in &samples {
                if !patient_schemas.contains_key(&s.patient_id) {
                    if let Ok(own) = base.personalize_bounds(&samples, &s.patient_id) {
                        patient_schemas.insert(s.patient_id.clone(), own);
                    }
                }
            }
        }
        let weights = config.weights(&base)?;

        let predicted: Vec<bool> = split
            .test
            .par_iter()
            .map(|&i| {
                classifier
                    .predict_class(&samples[i].features())
                    .map(|c| c == Outcome::Hyperglycemia)
            })
            .collect::<Result<_, _>>()
            .map_err(stage("pool"))?;
        let pool = split
            .test
            .iter()
            .zip(predicted)
            .filter(|(_, hyper)| *hyper)
            .map(|(&i, _)| i)
            .collect();

        Ok(Self {
            config: config.clone(),
            samples,
            profiles,
            n_skipped,
            classifier,
            simulator,
            split,
            pool,
            train_index,
            train_ranges,
            all_rows,
            dataset_schema,
            patient_schemas,
            weights,
            timings: BTreeMap::new(),
        })
    }

    /// Schema used for a sample: its patient's own lever boxes when
    /// available, otherwise the dataset-wide ones.
    pub fn schema_for(&self, sample: &FactualSample) -> &FeatureSchema {
        self.patient_schemas
            .get(&sample.patient_id)
            .unwrap_or(&self.dataset_schema)
    }

    /// Search parameters from the config for `schema` and `weights`.
    pub fn params(&self, schema: FeatureSchema, weights: PreferenceWeights, gamma: f64) -> CfParams {
        let cf = &self.config.cf;
        CfParams {
            gamma,
            max_iter: cf.max_iter,
            plateau_eps: cf.plateau_eps,
            plateau_patience: cf.plateau_patience,
            ..CfParams::new(schema, weights)
        }
    }

    /// Runs the engine on every pool sample with parameters chosen per
    /// sample. Results come back in pool order.
    pub fn generate<F>(&self, params_for: F) -> Result<Vec<(CfParams, CounterfactualResult)>, HarnessError>
    where
        F: Fn(&FactualSample) -> CfParams + Sync,
    {
        self.pool
            .par_iter()
            .map(|&i| {
                let s = &self.samples[i];
                let params = params_for(s);
                let r = generate_counterfactual(&self.classifier, &s.features(), &params)?;
                Ok((params, r))
            })
            .collect::<Result<_, crate::engine::EngineError>>()
            .map_err(stage("generate"))
    }

    /// GlyTwin on the pool with the configured weights and `gamma`.
    pub fn generate_default(&self, gamma: f64) -> Result<Vec<(CfParams, CounterfactualResult)>, HarnessError> {
        self.generate(|s| self.params(self.schema_for(s).clone(), self.weights.clone(), gamma))
    }

    pub fn pool_factuals(&self) -> Vec<Vec<f64>> {
        self.pool.iter().map(|&i| self.samples[i].features()).collect()
    }

    pub fn metric_inputs(&self) -> MetricInputs<'_> {
        MetricInputs {
            schema: &self.dataset_schema,
            target: Outcome::Normoglycemia,
            simulator: &self.simulator,
            nn_reference: &self.train_index,
            k: self.config.nn_k,
            ranges: &self.train_ranges,
            plausibility_reference: &self.all_rows,
        }
    }

    pub fn profile(&self, patient_id: &str) -> Option<&PatientProfile> {
        self.profiles.iter().find(|p| p.patient_id == patient_id)
    }
}
