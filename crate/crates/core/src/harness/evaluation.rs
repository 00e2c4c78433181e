use super::{stage, write_json, write_text, Experiment, HarnessError};
use crate::domain::{Feature, Outcome};
use crate::engine::{nice_baseline, CounterfactualResult, StopReason};
use crate::metrics::{self, render_table, Alignment, MetricsReport};
use crate::models::TrainedModel;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

/// Per-counterfactual raw outcome; every table row can be recomputed from
/// these.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CfRecord {
    pub generator: String,
    pub sample_index: usize,
    pub patient_id: String,
    pub factual: Vec<f64>,
    pub counterfactual: Vec<f64>,
    pub converged: bool,
    pub stop_reason: Option<StopReason>,
    pub iterations: usize,
    pub final_confidence: Option<f64>,
    pub predictor_calls: usize,
    /// Simulator moved the factual out of, and the CF into, the target class.
    pub valid: bool,
    pub nn_valid: bool,
    pub proximity: f64,
    pub n_changed: usize,
    pub n_violations: usize,
    pub plausible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub kind: String,
    pub n_train: usize,
    pub n_test: usize,
    pub accuracy: f64,
    pub f1: f64,
}

impl From<&TrainedModel> for ModelSummary {
    fn from(m: &TrainedModel) -> Self {
        Self {
            kind: m.kind().to_string(),
            n_train: m.report.n_train,
            n_test: m.report.n_test,
            accuracy: m.report.accuracy,
            f1: m.report.f1,
        }
    }
}

/// Deterministic summary of one evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub n_samples: usize,
    pub n_skipped: usize,
    pub hyperglycemic_fraction: f64,
    pub n_patients: usize,
    pub classifier: ModelSummary,
    pub simulator: ModelSummary,
    pub pool_size: usize,
    pub gamma: f64,
    /// One row per generator: GlyTwin first, then NICE.
    pub generators: Vec<MetricsReport>,
    /// Share of pool samples where NICE lands at least as close as GlyTwin.
    pub nice_not_farther_share: f64,
    pub stop_reasons: BTreeMap<String, usize>,
    pub max_iterations_used: usize,
    /// Share of GlyTwin CFs that move the bolus later relative to the meal.
    pub delta_t_increase_share: f64,
    pub alignment: Option<Alignment>,
    /// Why alignment is missing, if it is.
    pub alignment_note: Option<String>,
}

pub(crate) fn glytwin_records(exp: &Experiment, results: &[CounterfactualResult]) -> Result<Vec<CfRecord>, HarnessError> {
    let cfs: Vec<Vec<f64>> = results.iter().map(|r| r.counterfactual.clone()).collect();
    let mut records = base_records(exp, "glytwin", &cfs)?;
    for (rec, r) in records.iter_mut().zip(results) {
        rec.converged = r.converged;
        rec.stop_reason = Some(r.stop_reason);
        rec.iterations = r.iterations;
        rec.final_confidence = Some(r.final_confidence);
        rec.predictor_calls = r.predictor_calls;
    }
    Ok(records)
}

fn base_records(exp: &Experiment, generator: &str, cfs: &[Vec<f64>]) -> Result<Vec<CfRecord>, HarnessError> {
    let inputs = exp.metric_inputs();
    exp.pool
        .par_iter()
        .zip(cfs)
        .map(|(&i, cf)| {
            let x = exp.samples[i].features();
            let one_cf = std::slice::from_ref(cf);
            let one_x = std::slice::from_ref(&x);
            Ok(CfRecord {
                generator: generator.to_string(),
                sample_index: i,
                patient_id: exp.samples[i].patient_id.clone(),
                valid: metrics::validity(one_cf, one_x, inputs.simulator, inputs.target)? == 1.0,
                nn_valid: metrics::nn_test(one_cf, inputs.nn_reference, inputs.k, inputs.target)? == 1.0,
                proximity: metrics::proximity(cf, &x, inputs.ranges, inputs.schema)?,
                n_changed: metrics::sparsity(one_cf, one_x)? as usize,
                n_violations: metrics::violations(one_cf, one_x, inputs.schema)? as usize,
                plausible: metrics::plausibility(one_cf, inputs.plausibility_reference)? == 1.0,
                factual: x,
                counterfactual: cf.clone(),
                converged: true,
                stop_reason: None,
                iterations: 0,
                final_confidence: None,
                predictor_calls: 0,
            })
        })
        .collect::<Result<_, metrics::MetricsError>>()
        .map_err(stage("metrics"))
}

/// Nearest training sample of the target class for every pool sample.
pub(crate) fn nice_cfs(exp: &Experiment) -> Result<Vec<Vec<f64>>, HarnessError> {
    exp.pool
        .par_iter()
        .map(|&i| nice_baseline(&exp.train_index, &exp.samples[i].features(), Outcome::Normoglycemia))
        .collect::<Result<_, _>>()
        .map_err(stage("nice"))
}

pub(crate) fn delta_t_increase_share(results: &[CounterfactualResult]) -> f64 {
    if results.is_empty() {
        return 0.0;
    }
    let j = Feature::DeltaT.index();
    let n = results
        .iter()
        .filter(|r| r.counterfactual[j] > r.factual[j] + metrics::CHANGE_TOL)
        .count();
    n as f64 / results.len() as f64
}

pub(crate) struct Evaluation {
    pub report: EvaluationReport,
    pub records: Vec<CfRecord>,
    pub results: Vec<CounterfactualResult>,
    pub timings: BTreeMap<String, f64>,
}

pub(crate) fn evaluate(exp: &Experiment) -> Result<Evaluation, HarnessError> {
    if exp.pool.len() < 2 {
        return Err(HarnessError::Config(format!(
            "only {} held-out samples are predicted hyperglycemic",
            exp.pool.len()
        )));
    }
    let gamma = exp.config.cf.gamma;
    let mut timings = BTreeMap::new();
    let t = Instant::now();
    let runs = exp.generate_default(gamma)?;
    timings.insert("glytwin".to_string(), t.elapsed().as_secs_f64());
    let results: Vec<CounterfactualResult> = runs.into_iter().map(|(_, r)| r).collect();
    let t = Instant::now();
    let nice = nice_cfs(exp)?;
    timings.insert("nice".to_string(), t.elapsed().as_secs_f64());

    let factuals = exp.pool_factuals();
    let cfs: Vec<Vec<f64>> = results.iter().map(|r| r.counterfactual.clone()).collect();
    let n_converged = results.iter().filter(|r| r.converged).count();
    let inputs = exp.metric_inputs();
    let glytwin = MetricsReport::compute("glytwin", &factuals, &cfs, n_converged, &inputs).map_err(stage("metrics"))?;
    let nice_report = MetricsReport::compute("nice", &factuals, &nice, nice.len(), &inputs).map_err(stage("metrics"))?;

    let mut records = glytwin_records(exp, &results)?;
    let nice_records = base_records(exp, "nice", &nice)?;
    let not_farther = nice_records
        .iter()
        .zip(&records)
        .filter(|(n, g)| n.proximity <= g.proximity)
        .count();

    let mut stop_reasons = BTreeMap::new();
    for r in &results {
        let key = serde_json::to_value(r.stop_reason)?.as_str().unwrap_or_default().to_string();
        *stop_reasons.entry(key).or_insert(0) += 1;
    }

    let schema = &exp.dataset_schema;
    let align_weights = exp.config.alignment_weights(schema)?;
    let align_runs = exp.generate(|s| exp.params(exp.schema_for(s).clone(), align_weights.clone(), gamma))?;
    let align_results: Vec<CounterfactualResult> = align_runs.into_iter().map(|(_, r)| r).collect();
    let (alignment, alignment_note) =
        match metrics::preference_alignment(&align_results, &align_weights, &exp.train_ranges, schema) {
            Ok(a) => (Some(a), None),
            Err(e) => (None, Some(e.to_string())),
        };

    let report = EvaluationReport {
        n_samples: exp.samples.len(),
        n_skipped: exp.n_skipped,
        hyperglycemic_fraction: exp
            .samples
            .iter()
            .filter(|s| s.outcome == Outcome::Hyperglycemia)
            .count() as f64
            / exp.samples.len() as f64,
        n_patients: exp.profiles.len(),
        classifier: ModelSummary::from(&exp.classifier),
        simulator: ModelSummary::from(&exp.simulator),
        pool_size: exp.pool.len(),
        gamma,
        generators: vec![glytwin, nice_report],
        nice_not_farther_share: not_farther as f64 / records.len() as f64,
        stop_reasons,
        max_iterations_used: results.iter().map(|r| r.iterations).max().unwrap_or(0),
        delta_t_increase_share: delta_t_increase_share(&results),
        alignment,
        alignment_note,
    };
    records.extend(nice_records);
    Ok(Evaluation {
        report,
        records,
        results,
        timings,
    })
}

fn records_jsonl(records: &[CfRecord]) -> Result<String, HarnessError> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

/// Runs GlyTwin and the NICE baseline on the pool and writes, under
/// `out/evaluation/`:
///
/// - `report.json`: [`EvaluationReport`]
/// - `table.txt`: the metrics table
/// - `records.jsonl`: one [`CfRecord`] per generator and sample
/// - `subgroups.json`: per-group GlyTwin metrics
/// - `timing.json`: wall times and the runtime summary (not deterministic)
pub fn run_evaluation(exp: &Experiment, out: &Path) -> Result<EvaluationReport, HarnessError> {
    let eval = evaluate(exp)?;
    let dir = out.join("evaluation");
    write_json(&dir.join("report.json"), &eval.report)?;
    let mut table = render_table(&eval.report.generators);
    table.push_str(&format!(
        "\nclassifier accuracy {:.3}, simulator accuracy {:.3}, pool {} of {} samples\n",
        eval.report.classifier.accuracy,
        eval.report.simulator.accuracy,
        eval.report.pool_size,
        eval.report.n_samples
    ));
    write_text(&dir.join("table.txt"), &table)?;
    write_text(&dir.join("records.jsonl"), &records_jsonl(&eval.records)?)?;
    let glytwin: Vec<CfRecord> = eval.records.iter().filter(|r| r.generator == "glytwin").cloned().collect();
    let groups = super::subgroup_report(&glytwin, &exp.profiles, &exp.config.bins, exp.dataset_schema.len());
    write_json(&dir.join("subgroups.json"), &groups)?;

    let mut timings = exp.timings.clone();
    timings.extend(eval.timings);
    #[derive(Serialize)]
    struct Timing<'a> {
        stages_s: &'a BTreeMap<String, f64>,
        runtime: super::RuntimeReport,
    }
    write_json(
        &dir.join("timing.json"),
        &Timing {
            stages_s: &timings,
            runtime: super::runtime_report(&eval.results),
        },
    )?;
    Ok(eval.report)
}
