use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn fedsdwc(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedsdwc"))
        .args(args)
        .current_dir(cwd)
        .env_remove("FEDSDWC_OUT")
        .output()
        .expect("binary runs")
}

fn smoke_config() -> String {
    format!("{}/../../configs/smoke.config", env!("CARGO_MANIFEST_DIR"))
}

#[test]
fn run_twice_gives_identical_scores() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = smoke_config();
    for name in ["a", "b"] {
        let out = tmp.path().join(name);
        let o = fedsdwc(&["run", "--config", &cfg, "--out", out.to_str().unwrap()], tmp.path());
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let a = fs::read(tmp.path().join("a/scores.json")).unwrap();
    let b = fs::read(tmp.path().join("b/scores.json")).unwrap();
    assert_eq!(a, b);
    let scores: serde_json::Value = serde_json::from_slice(&a).unwrap();
    assert_eq!(scores["arm"], "weak");
    assert!(tmp.path().join("a/bound_report.csv").is_file());
}

#[test]
fn overrides_reach_the_resolved_config() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let o = fedsdwc(
        &[
            "run", "--out", out.to_str().unwrap(), "--rounds", "0", "--seed", "4", "--clients", "2",
            "--concentration", "2.5", "--intervention-scale", "0.3", "--causal-mode", "strong",
            "--local-epochs", "2", "--batch-size", "16", "--lr", "0.02",
        ],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let cfg: serde_json::Value = serde_json::from_slice(&fs::read(out.join("config.resolved.json")).unwrap()).unwrap();
    assert_eq!(cfg["seed"], 4);
    assert_eq!(cfg["federation"]["rounds"], 0);
    assert_eq!(cfg["federation"]["num_clients"], 2);
    assert_eq!(cfg["data"]["concentration"], 2.5);
    assert_eq!(cfg["federation"]["objective"]["intervention_scale"], 0.3);
    assert_eq!(cfg["model"]["causal_mode"], "strong");
    assert_eq!(cfg["federation"]["local_epochs"], 2);
    assert_eq!(cfg["federation"]["batch_size"], 16);
    assert_eq!(cfg["federation"]["learning_rate"], 0.02);
    assert_eq!(fs::read_to_string(out.join("training_log.ndjson")).unwrap(), "");
}

#[test]
fn default_output_root_comes_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("root");
    let o = Command::new(env!("CARGO_BIN_EXE_fedsdwc"))
        .args(["run", "--rounds", "0"])
        .current_dir(tmp.path())
        .env("FEDSDWC_OUT", &root)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(root.join("smoke/scores.json").is_file());

    let o = fedsdwc(&["run", "--rounds", "0"], tmp.path());
    assert!(o.status.success());
    assert!(tmp.path().join("runs/smoke/scores.json").is_file());
}

#[test]
fn invalid_config_reports_field_path() {
    let tmp = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(smoke_config()).unwrap().replace("\"batch_size\": 32", "\"batch_size\": -1");
    let path = tmp.path().join("bad.config");
    fs::write(&path, text).unwrap();
    let o = fedsdwc(&["run", "--config", path.to_str().unwrap()], tmp.path());
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("federation.batch_size"), "{err}");

    let o = fedsdwc(&["run", "--config", "missing.config"], tmp.path());
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing.config"));
}

#[test]
fn compare_prints_one_row_per_run() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("r");
    assert!(fedsdwc(&["run", "--rounds", "1", "--out", out.to_str().unwrap()], tmp.path()).status.success());
    let csv = tmp.path().join("cmp.csv");
    let o = fedsdwc(&["compare", out.to_str().unwrap(), out.to_str().unwrap(), "--csv", csv.to_str().unwrap()], tmp.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(String::from_utf8_lossy(&o.stdout).lines().count(), 3);
    let text = fs::read_to_string(csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[0].starts_with("run,arm,id_acc"));
    assert_eq!(lines[1], lines[2]);

    let o = fedsdwc(&["compare", tmp.path().join("none").to_str().unwrap()], tmp.path());
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("none"));
}

#[test]
fn partition_stats_table() {
    let tmp = tempfile::tempdir().unwrap();
    let o = fedsdwc(&["partition-stats", "--clients", "4", "--concentration", "0.1"], tmp.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8_lossy(&o.stdout);
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines[0], "client,size,tv,class_0,class_1,class_2");
    assert_eq!(lines.len(), 6);
    let total: usize = lines[1..5].iter().map(|l| l.split(',').nth(1).unwrap().parse::<usize>().unwrap()).sum();
    assert_eq!(total, 240);
    assert!(lines[5].starts_with("mean_tv,"));
}

#[test]
fn verify_bound_writes_report() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("b");
    let o = fedsdwc(
        &["verify-bound", "--sigma-grid", "0,0.01,0.03,0.1", "--num-x", "2000", "--out", out.to_str().unwrap()],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("bound_report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert_eq!(csv.lines().nth(1).unwrap(), "0,0,0,0,true,true");
    assert!(out.join("bound_report.json").is_file());
}
