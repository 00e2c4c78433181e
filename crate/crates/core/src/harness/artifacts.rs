//! On-disk layout shared by the CLI subcommands:
//!
//! ```text
//! <out>/raw/<patient>.csv        synthetic CGM/pump streams
//! <out>/raw/profiles.csv
//! <out>/dataset/samples.csv      processed meal events
//! <out>/dataset/profiles.csv
//! <out>/dataset/skipped.json
//! <out>/models/classifier.json
//! <out>/models/simulator.json
//! <out>/models/manifest.json     config fingerprint of the trained models
//! <out>/counterfactuals/...      `generate`
//! <out>/evaluation/...           `evaluate`
//! <out>/ablation/...             `ablate-gamma`, `ablate-delta`
//! <out>/subgroups/...            `subgroups`
//! ```

use super::evaluation::glytwin_records;
use super::report::narrate;
use super::{read_text, stage, subgroup_report, write_json, write_text, Experiment, ExperimentConfig, HarnessError, SubgroupRow};
use crate::domain::{read_profiles, read_samples, write_profiles, write_samples, FactualSample, Outcome, PatientProfile};
use crate::engine::{generate_counterfactual, write_trajectory_jsonl, CounterfactualResult, StopReason};
use crate::models::TrainedModel;
use crate::pipeline::{build_dataset, read_stream_dir, write_stream_dir, SkipRecord};
use crate::synthgen::generate_cohort;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

/// Paths of every artifact under one output directory.
#[derive(Debug, Clone, PartialEq)]
pub struct Artifacts {
    pub root: PathBuf,
}

impl Artifacts {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn raw_dir(&self) -> PathBuf {
        self.root.join("raw")
    }

    pub fn samples(&self) -> PathBuf {
        self.root.join("dataset/samples.csv")
    }

    pub fn profiles(&self) -> PathBuf {
        self.root.join("dataset/profiles.csv")
    }

    pub fn skipped(&self) -> PathBuf {
        self.root.join("dataset/skipped.json")
    }

    pub fn classifier(&self) -> PathBuf {
        self.root.join("models/classifier.json")
    }

    pub fn simulator(&self) -> PathBuf {
        self.root.join("models/simulator.json")
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("models/manifest.json")
    }

    pub fn has_dataset(&self) -> bool {
        self.samples().is_file() && self.profiles().is_file()
    }

    pub fn has_models(&self) -> bool {
        self.classifier().is_file() && self.simulator().is_file() && self.manifest().is_file()
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>, HarnessError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io_err(path))?;
    }
    Ok(std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err(path))?))
}

fn open(path: &Path) -> Result<std::io::BufReader<std::fs::File>, HarnessError> {
    Ok(std::io::BufReader::new(std::fs::File::open(path).map_err(io_err(path))?))
}

/// SHA-256 of the config with `out_dir` blanked, so the same experiment
/// written to two directories has the same fingerprint.
pub fn config_fingerprint(config: &ExperimentConfig) -> Result<String, HarnessError> {
    let mut c = config.clone();
    c.out_dir = PathBuf::new();
    Ok(hex::encode(Sha256::digest(c.to_toml()?.as_bytes())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_sha256: String,
    pub n_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub n_patients: usize,
    pub n_cgm_readings: usize,
    pub dir: PathBuf,
}

/// Generates the synthetic cohort into `<out>/raw/`.
pub fn run_synth(config: &ExperimentConfig, out: &Path) -> Result<SynthSummary, HarnessError> {
    config.validate()?;
    let (streams, profiles) = generate_cohort(&config.synth).map_err(stage("synth"))?;
    let art = Artifacts::new(out);
    let dir = art.raw_dir();
    write_stream_dir(&dir, &streams).map_err(stage("synth"))?;
    write_profiles(create(&dir.join("profiles.csv"))?, &profiles).map_err(stage("synth"))?;
    Ok(SynthSummary {
        n_patients: profiles.len(),
        n_cgm_readings: streams.iter().map(|s| s.cgm.len()).sum(),
        dir,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub n_samples: usize,
    pub n_skipped: usize,
    pub hyperglycemic_fraction: f64,
}

/// Builds the dataset from raw streams in `input` (a directory of
/// `<patient>.csv` files plus `profiles.csv`) into `<out>/dataset/`.
pub fn run_ingest(input: &Path, out: &Path) -> Result<IngestSummary, HarnessError> {
    let streams = read_stream_dir(input).map_err(stage("ingest"))?;
    let profiles = read_profiles(open(&input.join("profiles.csv"))?).map_err(stage("ingest"))?;
    let build = build_dataset(&streams, &profiles).map_err(stage("ingest"))?;
    let art = Artifacts::new(out);
    save_dataset(&art, &build.samples, &profiles, &build.skipped)?;
    Ok(IngestSummary {
        n_samples: build.samples.len(),
        n_skipped: build.skipped.len(),
        hyperglycemic_fraction: build.hyperglycemic_fraction(),
    })
}

fn save_dataset(
    art: &Artifacts,
    samples: &[FactualSample],
    profiles: &[PatientProfile],
    skipped: &[SkipRecord],
) -> Result<(), HarnessError> {
    write_samples(create(&art.samples())?, samples).map_err(stage("ingest"))?;
    write_profiles(create(&art.profiles())?, profiles).map_err(stage("ingest"))?;
    write_json(&art.skipped(), &skipped)
}

struct Dataset {
    samples: Vec<FactualSample>,
    profiles: Vec<PatientProfile>,
    n_skipped: usize,
}

fn load_dataset(art: &Artifacts) -> Result<Dataset, HarnessError> {
    let samples = read_samples(open(&art.samples())?).map_err(stage("dataset"))?;
    let profiles = read_profiles(open(&art.profiles())?).map_err(stage("dataset"))?;
    let skipped: Vec<SkipRecord> = serde_json::from_str(&read_text(&art.skipped())?)?;
    Ok(Dataset {
        samples,
        profiles,
        n_skipped: skipped.len(),
    })
}

fn save_models(art: &Artifacts, exp: &Experiment) -> Result<(), HarnessError> {
    for (model, path) in [(&exp.classifier, art.classifier()), (&exp.simulator, art.simulator())] {
        write_text(&path, &model.to_json().map_err(stage("train"))?)?;
    }
    write_json(
        &art.manifest(),
        &Manifest {
            config_sha256: config_fingerprint(&exp.config)?,
            n_samples: exp.samples.len(),
        },
    )
}

/// Trains both models on `<out>/dataset/` and saves them to `<out>/models/`.
pub fn run_train(config: &ExperimentConfig, out: &Path) -> Result<Experiment, HarnessError> {
    let art = Artifacts::new(out);
    if !art.has_dataset() {
        return Err(HarnessError::Config(format!(
            "no dataset under {}; run `ingest` first",
            out.display()
        )));
    }
    let data = load_dataset(&art)?;
    let exp = Experiment::train(config, data.samples, data.profiles, data.n_skipped)?;
    save_models(&art, &exp)?;
    Ok(exp)
}

/// Experiment backed by the artifacts in `out`. Missing artifacts are
/// produced (cohort, dataset, models) and saved; models trained under a
/// different config are an error.
pub fn load_experiment(config: &ExperimentConfig, out: &Path) -> Result<Experiment, HarnessError> {
    config.validate()?;
    let art = Artifacts::new(out);
    if art.has_models() && art.has_dataset() {
        let manifest: Manifest = serde_json::from_str(&read_text(&art.manifest())?)?;
        if manifest.config_sha256 != config_fingerprint(config)? {
            return Err(HarnessError::Config(format!(
                "models under {} were trained with a different config; rerun `train` or pick another --out",
                out.display()
            )));
        }
        let data = load_dataset(&art)?;
        let load = |p: PathBuf| TrainedModel::load(&p).map_err(stage("load_model"));
        return Experiment::from_models(
            config,
            data.samples,
            data.profiles,
            data.n_skipped,
            load(art.classifier())?,
            load(art.simulator())?,
        );
    }
    if art.has_dataset() {
        return run_train(config, out);
    }
    let (streams, profiles) = generate_cohort(&config.synth).map_err(stage("synth"))?;
    let build = build_dataset(&streams, &profiles).map_err(stage("ingest"))?;
    save_dataset(&art, &build.samples, &profiles, &build.skipped)?;
    let exp = Experiment::train(config, build.samples, profiles, build.skipped.len())?;
    save_models(&art, &exp)?;
    Ok(exp)
}

/// One `generate` output line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedCf {
    pub sample_index: usize,
    pub patient_id: String,
    pub observed: Outcome,
    pub converged: bool,
    pub stop_reason: StopReason,
    pub iterations: usize,
    pub initial_confidence: f64,
    pub final_confidence: f64,
    pub changed_features: Vec<String>,
    pub factual: Vec<f64>,
    pub counterfactual: Vec<f64>,
    pub narrative: Option<String>,
}

/// GlyTwin for one sample (any index into the dataset) or, without
/// `sample`, for the whole pool. Writes `counterfactuals.jsonl` and, for a
/// single sample, `trajectory.jsonl` under `<out>/counterfactuals/`.
pub fn run_generate(
    exp: &Experiment,
    out: &Path,
    sample: Option<usize>,
    gamma: f64,
) -> Result<Vec<GeneratedCf>, HarnessError> {
    let schema_names = |r: &CounterfactualResult| -> Vec<String> {
        r.changed_features()
            .into_iter()
            .map(|i| exp.dataset_schema.features[i].name.clone())
            .collect()
    };
    let runs: Vec<(usize, crate::engine::CfParams, CounterfactualResult)> = match sample {
        Some(i) => {
            let s = exp.samples.get(i).ok_or_else(|| {
                HarnessError::Config(format!("sample {i} out of range (dataset has {})", exp.samples.len()))
            })?;
            let params = exp.params(exp.schema_for(s).clone(), exp.weights.clone(), gamma);
            let r = generate_counterfactual(&exp.classifier, &s.features(), &params).map_err(stage("generate"))?;
            vec![(i, params, r)]
        }
        None => exp
            .pool
            .iter()
            .copied()
            .zip(exp.generate_default(gamma)?)
            .map(|(i, (p, r))| (i, p, r))
            .collect(),
    };
    let dir = out.join("counterfactuals");
    let mut lines = String::new();
    let mut generated = Vec::with_capacity(runs.len());
    for (i, params, r) in &runs {
        let s = &exp.samples[*i];
        let g = GeneratedCf {
            sample_index: *i,
            patient_id: s.patient_id.clone(),
            observed: s.outcome,
            converged: r.converged,
            stop_reason: r.stop_reason,
            iterations: r.iterations,
            initial_confidence: r.initial_confidence,
            final_confidence: r.final_confidence,
            changed_features: schema_names(r),
            factual: r.factual.clone(),
            counterfactual: r.counterfactual.clone(),
            narrative: narrate(&params.schema, r).ok(),
        };
        lines.push_str(&serde_json::to_string(&g)?);
        lines.push('\n');
        generated.push(g);
    }
    write_text(&dir.join("counterfactuals.jsonl"), &lines)?;
    if let [(_, _, r)] = runs.as_slice() {
        let path = dir.join("trajectory.jsonl");
        write_trajectory_jsonl(create(&path)?, r).map_err(stage("generate"))?;
    }
    Ok(generated)
}

/// GlyTwin on the pool, summarized per subgroup into
/// `<out>/subgroups/subgroups.json` and `subgroups.csv`.
pub fn run_subgroups(exp: &Experiment, out: &Path) -> Result<Vec<SubgroupRow>, HarnessError> {
    let results: Vec<CounterfactualResult> = exp
        .generate_default(exp.config.cf.gamma)?
        .into_iter()
        .map(|(_, r)| r)
        .collect();
    let records = glytwin_records(exp, &results)?;
    let rows = subgroup_report(&records, &exp.profiles, &exp.config.bins, exp.dataset_schema.len());
    let dir = out.join("subgroups");
    write_json(&dir.join("subgroups.json"), &rows)?;
    let mut csv = String::from("dimension,group,n_samples,n_patients,validity,proximity,sparsity,low_confidence\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},\"{}\",{},{},{:.4},{:.4},{:.4},{}\n",
            r.dimension, r.group, r.n_samples, r.n_patients, r.validity, r.proximity, r.sparsity, r.low_confidence
        ));
    }
    write_text(&dir.join("subgroups.csv"), &csv)?;
    Ok(rows)
}
