use glytwin_core::harness::{config_fingerprint, load_experiment, run_ingest, run_synth, run_train, Artifacts, ExperimentConfig};
use std::path::Path;

fn tiny_config(dir: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default().with_seed(5);
    cfg.out_dir = dir.to_path_buf();
    cfg.synth.n_patients = 8;
    cfg.synth.days_per_patient = 14.0;
    cfg.mlp.epochs = 10;
    cfg.mlp.hidden = vec![8, 8];
    cfg.gbt.n_estimators = 10;
    cfg.gbt.max_depth = 3;
    cfg
}

#[test]
fn fingerprint_ignores_out_dir_only() {
    let a = tiny_config(Path::new("/tmp/a"));
    let b = tiny_config(Path::new("/tmp/b"));
    assert_eq!(config_fingerprint(&a).unwrap(), config_fingerprint(&b).unwrap());
    assert_eq!(config_fingerprint(&a).unwrap().len(), 64);
    let mut c = a.clone();
    c.cf.gamma = 0.7;
    assert_ne!(config_fingerprint(&a).unwrap(), config_fingerprint(&c).unwrap());
    assert_ne!(config_fingerprint(&a).unwrap(), config_fingerprint(&a.clone().with_seed(6)).unwrap());
}

#[test]
fn staged_artifacts_reload_into_the_same_experiment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let art = Artifacts::new(dir.path());
    run_synth(&cfg, dir.path()).unwrap();
    run_ingest(&art.raw_dir(), dir.path()).unwrap();
    let trained = run_train(&cfg, dir.path()).unwrap();
    let loaded = load_experiment(&cfg, dir.path()).unwrap();
    assert_eq!(loaded.samples, trained.samples);
    assert_eq!(loaded.classifier, trained.classifier);
    assert_eq!(loaded.simulator, trained.simulator);
    assert_eq!(loaded.pool, trained.pool);

    let mut other = cfg.clone();
    other.cf.gamma = 0.7;
    let err = load_experiment(&other, dir.path()).err().expect("stale models must be refused");
    assert_eq!(err.kind(), "config");
}

#[test]
fn load_experiment_builds_missing_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let exp = load_experiment(&cfg, dir.path()).unwrap();
    let art = Artifacts::new(dir.path());
    assert!(art.has_dataset());
    assert!(art.has_models());
    assert!(!exp.samples.is_empty());
}
