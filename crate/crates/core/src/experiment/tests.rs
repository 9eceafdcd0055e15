use std::fs;
use std::path::PathBuf;

use super::*;
use crate::error::Error;
use crate::model::CausalMode;

fn smoke_in(dir: &std::path::Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::smoke();
    cfg.out_dir = Some(dir.to_path_buf());
    cfg
}

#[test]
fn smoke_config_round_trips() {
    let cfg = ExperimentConfig::smoke().resolve().unwrap();
    let text = cfg.to_json().unwrap();
    let back = ExperimentConfig::from_json(&text).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.resolve().unwrap(), cfg);
}

#[test]
fn derived_seeds_follow_the_master_seed() {
    let a = ExperimentConfig::smoke().resolve().unwrap();
    let mut b = ExperimentConfig::smoke();
    b.seed += 1;
    let b = b.resolve().unwrap();
    assert_ne!(a.federation.seed, b.federation.seed);
    assert_ne!(a.scm.mixing_seed, b.scm.mixing_seed);
    let mut c = ExperimentConfig::smoke();
    c.federation.seed = 999;
    assert_eq!(c.resolve().unwrap().federation.seed, a.federation.seed);
}

#[test]
fn parse_errors_carry_the_field_path() {
    let text = SMOKE_CONFIG.replace("\"rounds\": 2", "\"rounds\": \"two\"");
    match ExperimentConfig::from_json(&text).unwrap_err() {
        Error::Config { path, .. } => assert_eq!(path, "federation.rounds"),
        e => panic!("{e}"),
    }
    let text = SMOKE_CONFIG.replace("\"noise_sigma\"", "\"noise_sgima\"");
    match ExperimentConfig::from_json(&text).unwrap_err() {
        Error::Config { path, .. } => assert!(path.starts_with("scm"), "{path}"),
        e => panic!("{e}"),
    }
}

#[test]
fn semantic_errors_carry_the_field_path() {
    let mut cfg = ExperimentConfig::smoke();
    cfg.model.dim_x = 10;
    match cfg.resolve().unwrap_err() {
        Error::Config { path, .. } => assert_eq!(path, "model.dim_x"),
        e => panic!("{e}"),
    }
    let mut cfg = ExperimentConfig::smoke();
    cfg.data.corruptions[0].severity = 9;
    match cfg.resolve().unwrap_err() {
        Error::Config { path, .. } => assert_eq!(path, "data.corruptions[0].severity"),
        e => panic!("{e}"),
    }
    let mut cfg = ExperimentConfig::smoke();
    cfg.federation.batch_size = 0;
    assert!(matches!(cfg.resolve().unwrap_err(), Error::Config { path, .. } if path == "federation"));
}

#[test]
fn overrides_apply() {
    let mut cfg = ExperimentConfig::smoke();
    cfg.arms = vec![CausalMode::None, CausalMode::Weak];
    cfg.apply(&Overrides {
        out: Some(PathBuf::from("o")),
        seed: Some(5),
        rounds: Some(7),
        clients: Some(2),
        concentration: Some(3.0),
        intervention_scale: Some(0.25),
        causal_mode: Some(CausalMode::Strong),
        local_epochs: Some(2),
        batch_size: Some(8),
        lr: Some(0.5),
    });
    assert_eq!(cfg.out_dir, Some(PathBuf::from("o")));
    assert_eq!((cfg.seed, cfg.federation.rounds, cfg.federation.num_clients), (5, 7, 2));
    assert_eq!(cfg.data.concentration, 3.0);
    assert_eq!(cfg.federation.objective.intervention_scale, 0.25);
    assert_eq!(cfg.arm_modes(), vec![CausalMode::Strong]);
    assert_eq!((cfg.federation.local_epochs, cfg.federation.batch_size), (2, 8));
    assert_eq!(cfg.federation.learning_rate, 0.5);
}

#[test]
fn output_directory_precedence() {
    let mut cfg = ExperimentConfig::smoke();
    assert_eq!(resolve_out_dir(&cfg, None), PathBuf::from("runs/smoke"));
    assert_eq!(resolve_out_dir(&cfg, Some("/tmp/r")), PathBuf::from("/tmp/r/smoke"));
    cfg.out_dir = Some(PathBuf::from("here"));
    assert_eq!(resolve_out_dir(&cfg, Some("/tmp/r")), PathBuf::from("here"));
}

#[test]
fn smoke_run_is_byte_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let sa = run_experiment(smoke_in(a.path())).unwrap();
    run_experiment(smoke_in(b.path())).unwrap();
    let read = |d: &std::path::Path, f: &str| fs::read(d.join(f)).unwrap();
    assert_eq!(read(a.path(), "scores.json"), read(b.path(), "scores.json"));
    assert_eq!(read(a.path(), "bound_report.csv"), read(b.path(), "bound_report.csv"));
    for f in ["config.resolved.json", "training_log.ndjson", "scores.csv", "checkpoint/manifest.json"] {
        assert!(a.path().join(f).is_file(), "{f}");
    }
    let log = fs::read_to_string(a.path().join("training_log.ndjson")).unwrap();
    assert_eq!(log.lines().count(), 2);
    assert_eq!(sa.arms.len(), 1);
    assert_eq!(sa.arms[0].scores.arm, "weak");
    let report = sa.bound.unwrap();
    assert_eq!(report.rows[0].lhs, 0.0);
    assert_eq!(report.rows[0].rhs, 0.0);

    // the resolved config alone reproduces the scores
    let c = tempfile::tempdir().unwrap();
    let mut resolved = ExperimentConfig::load(&a.path().join("config.resolved.json")).unwrap();
    resolved.out_dir = Some(c.path().to_path_buf());
    run_experiment(resolved).unwrap();
    assert_eq!(read(a.path(), "scores.json"), read(c.path(), "scores.json"));
}

#[test]
fn zero_rounds_scores_the_initial_model() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = smoke_in(dir.path());
    cfg.federation.rounds = 0;
    cfg.theory = None;
    let s = run_experiment(cfg).unwrap();
    assert_eq!(fs::read_to_string(dir.path().join("training_log.ndjson")).unwrap(), "");
    assert!(s.arms[0].scores.report.id_acc.is_finite());
    assert!(!dir.path().join("bound_report.csv").exists());
}

#[test]
fn ablation_sweep_labels_match_directories() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = smoke_in(dir.path());
    cfg.arms = CausalMode::ALL.to_vec();
    cfg.federation.rounds = 1;
    cfg.theory = None;
    run_experiment(cfg).unwrap();
    for mode in CausalMode::ALL {
        let sub = dir.path().join(mode.name());
        let scores: ScoresFile = serde_json::from_str(&fs::read_to_string(sub.join("scores.json")).unwrap()).unwrap();
        assert_eq!(scores.arm, mode.name());
        assert!(scores.report.id_acc.is_finite());
        let arm_cfg = ExperimentConfig::load(&sub.join("config.resolved.json")).unwrap();
        assert_eq!(arm_cfg.model.causal_mode, mode);
        assert!(arm_cfg.arms.is_empty());
    }
}

#[test]
fn compare_reads_scores_exactly() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut cfg = smoke_in(a.path());
    cfg.theory = None;
    cfg.federation.rounds = 1;
    run_experiment(cfg.clone()).unwrap();
    cfg.out_dir = Some(b.path().to_path_buf());
    run_experiment(cfg).unwrap();

    let text = fs::read_to_string(a.path().join("scores.json")).unwrap();
    let raw: serde_json::Value = serde_json::from_str(&text).unwrap();
    let one = compare_runs(&[a.path().to_path_buf()]).unwrap();
    assert_eq!(one.rows.len(), 1);
    let row = &one.rows[0];
    assert_eq!(row.id_acc, raw["id_acc"].as_f64().unwrap());
    let idc: Vec<f64> = raw["idc_acc"].as_object().unwrap().values().map(|v| v.as_f64().unwrap()).collect();
    let hand = idc.iter().sum::<f64>() / idc.len() as f64;
    assert!((row.mean_idc_acc.unwrap() - hand).abs() < 1e-9);
    assert_eq!(row.detection["semantic"].auroc, raw["detection"]["semantic"]["auroc"].as_f64().unwrap());

    let two = compare_runs(&[a.path().to_path_buf(), b.path().to_path_buf()]).unwrap();
    let strip = |r: &ComparisonRow| (r.id_acc, r.mean_idc_acc, r.detection.clone());
    assert_eq!(strip(&two.rows[0]), strip(&two.rows[1]));
    let csv = two.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert!(lines[0].starts_with("run,arm,id_acc,mean_idc_acc,auroc/semantic,fpr95/semantic"));
    assert_eq!(lines[1].split_once(',').unwrap().1, lines[2].split_once(',').unwrap().1);
    assert!(two.to_table().lines().count() == 3);
}

#[test]
fn compare_names_missing_directory() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    match compare_runs(&[missing.clone()]).unwrap_err() {
        Error::MissingFile(p) => assert!(p.starts_with(&missing)),
        e => panic!("{e}"),
    }
}

#[test]
fn numeric_failure_keeps_partial_log() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = smoke_in(dir.path());
    cfg.theory = None;
    cfg.federation.learning_rate = 1e30;
    cfg.federation.rounds = 5;
    assert!(run_experiment(cfg).is_err());
    assert!(dir.path().join("config.resolved.json").is_file());
    assert!(dir.path().join("training_log.ndjson").is_file());
    assert!(!dir.path().join("scores.json").exists());
}

#[test]
fn partition_stats_cover_training_set() {
    let cfg = ExperimentConfig::smoke();
    let stats = partition_stats(&cfg).unwrap();
    assert_eq!(stats.histograms.len(), cfg.federation.num_clients);
    let total: usize = stats.histograms.iter().flatten().sum();
    assert_eq!(total, cfg.data.train_size);
    assert!(stats.tv_to_global.iter().all(|t| (0.0..=1.0).contains(t)));
    assert_eq!(stats.to_table().lines().count(), cfg.federation.num_clients + 1);
}
