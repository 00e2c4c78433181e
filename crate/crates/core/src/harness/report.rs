use super::{CfRecord, HarnessError, SubgroupBins};
use crate::domain::{Feature, FeatureSchema, PatientProfile};
use crate::engine::{CounterfactualResult, StopReason};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

/// Groups with fewer patients than this are flagged.
pub const MIN_GROUP_PATIENTS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupRow {
    /// `age`, `sex`, `a1c` or `years_from_diagnosis`.
    pub dimension: String,
    pub group: String,
    pub n_samples: usize,
    pub n_patients: usize,
    pub validity: f64,
    pub proximity: f64,
    pub sparsity: f64,
    pub low_confidence: bool,
}

fn bin_label(v: f64, edges: &[f64], decimals: usize) -> String {
    let f = |e: f64| format!("{e:.decimals$}");
    match edges.iter().position(|&e| v < e) {
        Some(0) => format!("<{}", f(edges[0])),
        Some(k) => format!("[{}, {})", f(edges[k - 1]), f(edges[k])),
        None if edges.is_empty() => "all".to_string(),
        None => format!(">={}", f(edges[edges.len() - 1])),
    }
}

/// Index of the bin `v` falls in, for ordering rows.
fn bin_index(v: f64, edges: &[f64]) -> usize {
    edges.iter().position(|&e| v < e).unwrap_or(edges.len())
}

/// GlyTwin validity, proximity and sparsity per age bin, sex, A1C band and
/// diagnosis-duration band. Records whose patient has no profile are left
/// out; empty groups produce no row.
pub fn subgroup_report(
    records: &[CfRecord],
    profiles: &[PatientProfile],
    bins: &SubgroupBins,
    n_features: usize,
) -> Vec<SubgroupRow> {
    let by_id: BTreeMap<&str, &PatientProfile> = profiles.iter().map(|p| (p.patient_id.as_str(), p)).collect();
    type Key = (usize, usize, String);
    let mut groups: BTreeMap<Key, Vec<&CfRecord>> = BTreeMap::new();
    for r in records {
        let Some(p) = by_id.get(r.patient_id.as_str()) else {
            continue;
        };
        let age = p.age as f64;
        let keys: [Key; 4] = [
            (0, bin_index(age, &bins.age), bin_label(age, &bins.age, 0)),
            (1, p.sex as usize, p.sex.to_string()),
            (2, bin_index(p.a1c, &bins.a1c), bin_label(p.a1c, &bins.a1c, 1)),
            (
                3,
                bin_index(p.years_from_diagnosis, &bins.years_from_diagnosis),
                bin_label(p.years_from_diagnosis, &bins.years_from_diagnosis, 0),
            ),
        ];
        for k in keys {
            groups.entry(k).or_default().push(r);
        }
    }
    let dims = ["age", "sex", "a1c", "years_from_diagnosis"];
    groups
        .into_iter()
        .map(|((dim, _, group), rs)| {
            let n = rs.len() as f64;
            let patients: BTreeSet<&str> = rs.iter().map(|r| r.patient_id.as_str()).collect();
            let sparsity = rs.iter().map(|r| r.n_changed as f64).sum::<f64>() / n;
            debug_assert!(sparsity <= n_features as f64);
            SubgroupRow {
                dimension: dims[dim].to_string(),
                group,
                n_samples: rs.len(),
                n_patients: patients.len(),
                validity: rs.iter().filter(|r| r.valid).count() as f64 / n,
                proximity: rs.iter().map(|r| r.proximity).sum::<f64>() / n,
                sparsity,
                low_confidence: patients.len() < MIN_GROUP_PATIENTS,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuntimeGroup {
    pub n: usize,
    pub mean_wall_s: Option<f64>,
    pub median_wall_s: Option<f64>,
    pub mean_iterations: Option<f64>,
}

impl RuntimeGroup {
    fn of(results: &[&CounterfactualResult]) -> Self {
        if results.is_empty() {
            return Self { n: 0, mean_wall_s: None, median_wall_s: None, mean_iterations: None };
        }
        let n = results.len() as f64;
        let mut times: Vec<f64> = results.iter().map(|r| r.wall_time_s).collect();
        times.sort_by(f64::total_cmp);
        let mid = times.len() / 2;
        let median = if times.len() % 2 == 1 {
            times[mid]
        } else {
            (times[mid - 1] + times[mid]) / 2.0
        };
        Self {
            n: results.len(),
            mean_wall_s: Some(times.iter().sum::<f64>() / n),
            median_wall_s: Some(median),
            mean_iterations: Some(results.iter().map(|r| r.iterations as f64).sum::<f64>() / n),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuntimeReport {
    pub converged: RuntimeGroup,
    pub not_converged: RuntimeGroup,
    /// Non-converged runs per stop reason.
    pub not_converged_reasons: BTreeMap<String, usize>,
    pub delta_t_increase_share: f64,
}

/// Wall time split by convergence.
pub fn runtime_report(results: &[CounterfactualResult]) -> RuntimeReport {
    let (conv, rest): (Vec<&CounterfactualResult>, Vec<&CounterfactualResult>) =
        results.iter().partition(|r| r.converged);
    let mut reasons = BTreeMap::new();
    for r in &rest {
        let name = match r.stop_reason {
            StopReason::Converged => "converged",
            StopReason::MaxIterations => "max_iterations",
            StopReason::Plateau => "plateau",
            StopReason::MaskExhausted => "mask_exhausted",
            StopReason::NoSalientFeature => "no_salient_feature",
        };
        *reasons.entry(name.to_string()).or_insert(0) += 1;
    }
    RuntimeReport {
        converged: RuntimeGroup::of(&conv),
        not_converged: RuntimeGroup::of(&rest),
        not_converged_reasons: reasons,
        delta_t_increase_share: super::evaluation::delta_t_increase_share(results),
    }
}

fn trim_number(v: f64, decimals: usize) -> String {
    let s = format!("{v:.decimals$}");
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

fn clause(feature: Feature, old: f64, new: f64) -> String {
    let up = new > old;
    match feature {
        Feature::CarbSize => format!(
            "{} the meal to {} g of carbohydrates (from {} g)",
            if up { "increase" } else { "reduce" },
            trim_number(new, 0),
            trim_number(old, 0)
        ),
        Feature::TotalBolus => format!(
            "{} bolus by {} units to {} units",
            if up { "increase" } else { "reduce" },
            trim_number((new - old).abs(), 2),
            trim_number(new, 2)
        ),
        Feature::DeltaT => {
            let m = trim_number(new.abs(), 0);
            if new < 0.0 {
                format!("take the bolus {m} minutes before meal")
            } else if new > 0.0 {
                format!("take the bolus {m} minutes after starting the meal")
            } else {
                "take the bolus at the start of the meal".to_string()
            }
        }
        Feature::PremealBgl => format!(
            "eat after BGL {} to {} mg/dL",
            if up { "rises" } else { "drops" },
            trim_number(new, 0)
        ),
        other => format!(
            "change {} from {} to {}",
            other.name(),
            trim_number(old, 2),
            trim_number(new, 2)
        ),
    }
}

/// Plain-language intervention for a converged result, one clause per
/// changed feature in schema order.
pub fn narrate(schema: &FeatureSchema, result: &CounterfactualResult) -> Result<String, HarnessError> {
    if !result.converged {
        return Err(HarnessError::NotConverged);
    }
    let clauses: Vec<String> = result
        .changed_features()
        .into_iter()
        .filter_map(|i| {
            let f = Feature::from_name(&schema.features[i].name)?;
            Some(clause(f, result.factual[i], result.counterfactual[i]))
        })
        .collect();
    Ok(match clauses.len() {
        0 => "No change needed: this meal plan is already predicted to stay in range.".to_string(),
        1 => format!("You can prevent hyperglycemia if you {}.", clauses[0]),
        n => format!(
            "You can prevent hyperglycemia if you {} and {}.",
            clauses[..n - 1].join(", "),
            clauses[n - 1]
        ),
    })
}
