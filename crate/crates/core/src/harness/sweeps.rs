use super::evaluation::glytwin_records;
use super::{write_json, write_text, Experiment, HarnessError};
use crate::engine::CounterfactualResult;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaRow {
    pub gamma: f64,
    pub n: usize,
    pub n_converged: usize,
    pub mean_iterations: f64,
    pub mean_proximity: f64,
    pub validity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaSweep {
    pub rows: Vec<GammaRow>,
    /// `None` for a single-point grid.
    pub iterations_non_decreasing: Option<bool>,
    pub proximity_non_decreasing: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    /// Step as a fraction of each lever's dataset-wide range.
    pub fraction: f64,
    pub n: usize,
    pub n_converged: usize,
    pub validity: f64,
    pub mean_proximity: f64,
    pub sparsity: f64,
    pub mean_iterations: f64,
    /// Deterministic runtime proxy.
    pub mean_predictor_calls: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaSweep {
    pub rows: Vec<DeltaRow>,
    pub proximity_non_decreasing: Option<bool>,
    /// Largest |sparsity − first row's sparsity|.
    pub sparsity_max_deviation: f64,
    /// Every row's sparsity within ±0.25 of the first row's.
    pub sparsity_stable: bool,
}

/// Half-width of the sparsity stability band.
pub const SPARSITY_BAND: f64 = 0.25;

fn non_decreasing(values: impl Iterator<Item = f64>) -> Option<bool> {
    let v: Vec<f64> = values.collect();
    (v.len() > 1).then(|| v.windows(2).all(|w| w[1] >= w[0]))
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

struct Cell {
    results: Vec<CounterfactualResult>,
    records: Vec<super::CfRecord>,
    wall_s: f64,
}

fn run_cell(exp: &Experiment, runs: Vec<(crate::engine::CfParams, CounterfactualResult)>, started: Instant) -> Result<Cell, HarnessError> {
    let wall_s = started.elapsed().as_secs_f64();
    let results: Vec<CounterfactualResult> = runs.into_iter().map(|(_, r)| r).collect();
    let records = glytwin_records(exp, &results)?;
    Ok(Cell { results, records, wall_s })
}

fn fmt_row(cells: &[String]) -> String {
    cells.join(",")
}

/// GlyTwin over the pool for every γ in the grid. Writes
/// `gamma_sweep.json`, `gamma_sweep.csv` and `gamma_timing.json` under
/// `out/ablation/`.
pub fn ablate_gamma(exp: &Experiment, out: &Path) -> Result<GammaSweep, HarnessError> {
    let mut rows = Vec::new();
    let mut timing = BTreeMap::new();
    for &gamma in &exp.config.gamma_grid {
        let t = Instant::now();
        let cell = run_cell(exp, exp.generate_default(gamma)?, t)?;
        timing.insert(format!("{gamma:.2}"), cell.wall_s);
        rows.push(GammaRow {
            gamma,
            n: cell.results.len(),
            n_converged: cell.results.iter().filter(|r| r.converged).count(),
            mean_iterations: mean(cell.results.iter().map(|r| r.iterations as f64)),
            mean_proximity: mean(cell.records.iter().map(|r| r.proximity)),
            validity: mean(cell.records.iter().map(|r| r.valid as u8 as f64)),
        });
    }
    let sweep = GammaSweep {
        iterations_non_decreasing: non_decreasing(rows.iter().map(|r| r.mean_iterations)),
        proximity_non_decreasing: non_decreasing(rows.iter().map(|r| r.mean_proximity)),
        rows,
    };
    let dir = out.join("ablation");
    write_json(&dir.join("gamma_sweep.json"), &sweep)?;
    let mut csv = String::from("gamma,n,n_converged,mean_iterations,mean_proximity,validity\n");
    for r in &sweep.rows {
        let _ = writeln!(
            csv,
            "{}",
            fmt_row(&[
                format!("{:.2}", r.gamma),
                r.n.to_string(),
                r.n_converged.to_string(),
                format!("{:.4}", r.mean_iterations),
                format!("{:.4}", r.mean_proximity),
                format!("{:.4}", r.validity),
            ])
        );
    }
    write_text(&dir.join("gamma_sweep.csv"), &csv)?;
    write_json(&dir.join("gamma_timing.json"), &timing)?;
    Ok(sweep)
}

/// GlyTwin over the pool with every lever step set to a fraction of its
/// dataset-wide range. Lever boxes are dataset-wide too, so the step is
/// the same for every patient. Writes `delta_sweep.json`,
/// `delta_sweep.csv` and `delta_timing.json` under `out/ablation/`.
pub fn ablate_delta(exp: &Experiment, out: &Path) -> Result<DeltaSweep, HarnessError> {
    let mut rows = Vec::new();
    let mut timing = BTreeMap::new();
    let gamma = exp.config.cf.gamma;
    for &fraction in &exp.config.delta_grid {
        let schema = exp.dataset_schema.with_step_fraction(fraction);
        let t = Instant::now();
        let runs = exp.generate(|_| exp.params(schema.clone(), exp.weights.clone(), gamma))?;
        let cell = run_cell(exp, runs, t)?;
        timing.insert(format!("{fraction:.2}"), cell.wall_s);
        rows.push(DeltaRow {
            fraction,
            n: cell.results.len(),
            n_converged: cell.results.iter().filter(|r| r.converged).count(),
            validity: mean(cell.records.iter().map(|r| r.valid as u8 as f64)),
            mean_proximity: mean(cell.records.iter().map(|r| r.proximity)),
            sparsity: mean(cell.records.iter().map(|r| r.n_changed as f64)),
            mean_iterations: mean(cell.results.iter().map(|r| r.iterations as f64)),
            mean_predictor_calls: mean(cell.results.iter().map(|r| r.predictor_calls as f64)),
        });
    }
    let first = rows[0].sparsity;
    let deviation = rows.iter().map(|r| (r.sparsity - first).abs()).fold(0.0, f64::max);
    let sweep = DeltaSweep {
        proximity_non_decreasing: non_decreasing(rows.iter().map(|r| r.mean_proximity)),
        sparsity_max_deviation: deviation,
        sparsity_stable: deviation <= SPARSITY_BAND,
        rows,
    };
    let dir = out.join("ablation");
    write_json(&dir.join("delta_sweep.json"), &sweep)?;
    let mut csv =
        String::from("fraction,n,n_converged,validity,mean_proximity,sparsity,mean_iterations,mean_predictor_calls\n");
    for r in &sweep.rows {
        let _ = writeln!(
            csv,
            "{}",
            fmt_row(&[
                format!("{:.2}", r.fraction),
                r.n.to_string(),
                r.n_converged.to_string(),
                format!("{:.4}", r.validity),
                format!("{:.4}", r.mean_proximity),
                format!("{:.4}", r.sparsity),
                format!("{:.4}", r.mean_iterations),
                format!("{:.4}", r.mean_predictor_calls),
            ])
        );
    }
    write_text(&dir.join("delta_sweep.csv"), &csv)?;
    write_json(&dir.join("delta_timing.json"), &timing)?;
    Ok(sweep)
}
