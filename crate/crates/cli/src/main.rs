//! `glytwin`: synthesize a cohort, build the dataset, train the models,
//! generate and evaluate counterfactuals, run the sweeps, or serve the API.
//!
//! Every subcommand prints one JSON summary to stdout. Failures print a JSON
//! error record to stderr and exit nonzero.

use anyhow::Context;
use clap::{Parser, Subcommand};
use glytwin_core::harness::{
    ablate_delta, ablate_gamma, load_experiment, run_evaluation, run_generate, run_ingest, run_subgroups,
    run_synth, run_train, Artifacts, ExperimentConfig, HarnessError,
};
use glytwin_service::{ServiceConfig, ServiceError, CONFIG_ENV};
use serde::Serialize;
use serde_json::json;
use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;
use tracing_subscriber::EnvFilter;

#[derive(Debug, Parser)]
#[command(name = "glytwin", version, about = "Counterfactual meal interventions for postprandial hyperglycemia")]
struct Cli {
    /// Experiment config (TOML). Defaults apply to every missing key.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Seed for the synthetic cohort, the split and model initialization.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides `out_dir` from the config.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic CGM and pump streams into <out>/raw.
    Synth,
    /// Build meal events from raw streams into <out>/dataset.
    Ingest {
        /// Directory of <patient>.csv streams plus profiles.csv [default: <out>/raw]
        #[arg(long, value_name = "DIR")]
        input: Option<PathBuf>,
    },
    /// Train the classifier and the simulator into <out>/models.
    Train,
    /// Counterfactuals for the test pool, or for one dataset sample.
    Generate {
        /// Row index into <out>/dataset/samples.csv.
        #[arg(long)]
        sample: Option<usize>,
        /// Target confidence [default: from config]
        #[arg(long)]
        gamma: Option<f64>,
    },
    /// GlyTwin against the NICE baseline, with subgroup and runtime reports.
    Evaluate,
    /// Sweep the target confidence over the configured grid.
    AblateGamma,
    /// Sweep lever step sizes over the configured fractions of each range.
    AblateDelta,
    /// GlyTwin metrics per age, sex, A1C and diagnosis-duration group.
    Subgroups,
    /// Serve the HTTP API on the trained classifier.
    Serve {
        /// Listen address [default: service config or 127.0.0.1:8080]
        #[arg(long)]
        bind: Option<String>,
        /// Model file [default: <out>/models/classifier.json]
        #[arg(long, value_name = "FILE")]
        model: Option<PathBuf>,
        /// Samples CSV [default: <out>/dataset/samples.csv]
        #[arg(long, value_name = "FILE")]
        dataset: Option<PathBuf>,
    },
}

fn experiment_config(cli: &Cli) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn summary<T: Serialize>(command: &str, out: &std::path::Path, result: T) -> anyhow::Result<serde_json::Value> {
    Ok(json!({ "command": command, "out": out, "result": serde_json::to_value(result)? }))
}

fn run(cli: Cli) -> anyhow::Result<serde_json::Value> {
    let cfg = experiment_config(&cli)?;
    let out = cfg.out_dir.clone();
    match cli.command {
        Command::Synth => summary("synth", &out, run_synth(&cfg, &out)?),
        Command::Ingest { input } => {
            let input = input.unwrap_or_else(|| Artifacts::new(&out).raw_dir());
            summary("ingest", &out, run_ingest(&input, &out)?)
        }
        Command::Train => {
            let exp = run_train(&cfg, &out)?;
            let report = |m: &glytwin_core::models::TrainedModel| {
                json!({ "kind": m.kind(), "accuracy": m.report.accuracy, "f1": m.report.f1 })
            };
            summary(
                "train",
                &out,
                json!({ "classifier": report(&exp.classifier), "simulator": report(&exp.simulator), "pool_size": exp.pool.len() }),
            )
        }
        Command::Generate { sample, gamma } => {
            let exp = load_experiment(&cfg, &out)?;
            let generated = run_generate(&exp, &out, sample, gamma.unwrap_or(cfg.cf.gamma))?;
            let converged = generated.iter().filter(|g| g.converged).count();
            let first = sample.and_then(|_| generated.first());
            summary(
                "generate",
                &out,
                json!({ "n": generated.len(), "n_converged": converged, "counterfactual": first }),
            )
        }
        Command::Evaluate => {
            let exp = load_experiment(&cfg, &out)?;
            summary("evaluate", &out, run_evaluation(&exp, &out)?)
        }
        Command::AblateGamma => {
            let exp = load_experiment(&cfg, &out)?;
            summary("ablate-gamma", &out, ablate_gamma(&exp, &out)?)
        }
        Command::AblateDelta => {
            let exp = load_experiment(&cfg, &out)?;
            summary("ablate-delta", &out, ablate_delta(&exp, &out)?)
        }
        Command::Subgroups => {
            let exp = load_experiment(&cfg, &out)?;
            summary("subgroups", &out, run_subgroups(&exp, &out)?)
        }
        Command::Serve { bind, model, dataset } => {
            let art = Artifacts::new(&out);
            let mut svc = if std::env::var_os(CONFIG_ENV).is_some() {
                ServiceConfig::from_env()?
            } else {
                ServiceConfig {
                    model_path: art.classifier(),
                    dataset_path: art.samples(),
                    gamma: cfg.cf.gamma,
                    max_iter: cfg.cf.max_iter,
                    ..ServiceConfig::default()
                }
            };
            svc.bind = bind.unwrap_or(svc.bind);
            svc.model_path = model.unwrap_or(svc.model_path);
            svc.dataset_path = dataset.unwrap_or(svc.dataset_path);
            let runtime = tokio::runtime::Runtime::new().context("starting the async runtime")?;
            runtime.block_on(glytwin_service::serve(svc.clone()))?;
            summary("serve", &out, json!({ "bind": svc.bind }))
        }
    }
}

fn error_kind(err: &anyhow::Error) -> &'static str {
    if let Some(h) = err.downcast_ref::<HarnessError>() {
        h.kind()
    } else if err.downcast_ref::<ServiceError>().is_some() {
        "service"
    } else {
        "error"
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let record = json!({ "error": "usage", "message": e.to_string().trim_end() });
            eprintln!("{record}");
            return ExitCode::from(2);
        }
    };
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")))
        .init();
    match run(cli) {
        Ok(summary) => {
            // A closed pipe on stdout is not a failure of the command.
            let _ = writeln!(std::io::stdout(), "{summary}");
            ExitCode::SUCCESS
        }
        Err(err) => {
            let causes: Vec<String> = err.chain().skip(1).map(|c| c.to_string()).collect();
            let record = json!({ "error": error_kind(&err), "message": err.to_string(), "causes": causes });
            eprintln!("{record}");
            ExitCode::FAILURE
        }
    }
}
