use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, TheorySection};
use super::json::{to_line, to_pretty, Precision, FLOAT_DIGITS};
use crate::data::{
    apply_corruption, dirichlet_partition, generate_scm_dataset, label_histogram, make_semantic_ood, total_variation,
    LabeledDataset, PartitionSpec,
};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_suite, Detection, ScoreReport};
use crate::federation::{run_federation_streaming, RoundRecord};
use crate::model::{init_params, save_checkpoint, CausalMode};
use crate::rng::derive_seed;
use crate::theory::{verify_bound, BoundReport, InstanceFamily};

const ARTIFACT_PRECISION: Precision = Precision::Significant(FLOAT_DIGITS);

/// Everything an arm trains and is scored on.
#[derive(Clone, Debug)]
pub struct ExperimentData {
    pub train: LabeledDataset,
    pub partition: PartitionSpec,
    /// Named evaluation sets: the clean test set, covariate-shift sets and
    /// the semantic-shift set.
    pub eval_sets: Vec<(String, LabeledDataset)>,
}

pub fn build_datasets(cfg: &ExperimentConfig) -> Result<ExperimentData> {
    let seed = cfg.seed;
    let spec = &cfg.scm;
    let d = &cfg.data;
    let zero = vec![0.0; spec.dim_z];
    let train = generate_scm_dataset(spec, d.train_size, &zero, derive_seed(seed, "train", &[]))?.dataset;
    let test = generate_scm_dataset(spec, d.test_size, &zero, derive_seed(seed, "test", &[]))?.dataset;
    let mut eval_sets = Vec::new();
    for (i, &m) in d.style_shifts.iter().enumerate() {
        let shift = vec![m; spec.dim_z];
        let ds = generate_scm_dataset(spec, d.test_size, &shift, derive_seed(seed, "style-shift", &[i as u64]))?.dataset;
        eval_sets.push((format!("style_shift_{m}"), ds));
    }
    for (i, c) in d.corruptions.iter().enumerate() {
        let ds = apply_corruption(&test, c.kind, c.severity, derive_seed(seed, "corruption", &[i as u64]))?;
        eval_sets.push((format!("{}_{}", c.kind, c.severity), ds));
    }
    eval_sets.insert(0, ("id_test".to_string(), test));
    eval_sets.push((
        "semantic".to_string(),
        make_semantic_ood(spec, d.ood_size, derive_seed(seed, "semantic", &[]))?,
    ));
    let partition = dirichlet_partition(
        train.labels(),
        cfg.federation.num_clients,
        d.concentration,
        derive_seed(seed, "partition", &[]),
    )?;
    Ok(ExperimentData {
        train,
        partition,
        eval_sets,
    })
}

/// Contents of `scores.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoresFile {
    pub arm: String,
    pub name: String,
    pub seed: u64,
    pub mean_idc_acc: Option<f64>,
    #[serde(flatten)]
    pub report: ScoreReport,
}

#[derive(Clone, Debug)]
pub struct ArmResult {
    pub arm: CausalMode,
    pub dir: PathBuf,
    pub scores: ScoresFile,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub arms: Vec<ArmResult>,
    pub bound: Option<BoundReport>,
}

/// `out_dir` from the config, then `$FEDSDWC_OUT/<name>`, then
/// `runs/<name>`.
pub fn resolve_out_dir(cfg: &ExperimentConfig, env_root: Option<&str>) -> PathBuf {
    if let Some(d) = &cfg.out_dir {
        return d.clone();
    }
    match env_root {
        Some(root) if !root.is_empty() => Path::new(root).join(&cfg.name),
        _ => Path::new("runs").join(&cfg.name),
    }
}

pub fn run_theory(t: &TheorySection, master_seed: u64) -> Result<BoundReport> {
    let family = InstanceFamily::random(t.dim_v, t.num_clients, derive_seed(master_seed, "theory", &[0]))?;
    verify_bound(&family, &t.sigma_grid, t.prior_gap, t.num_x, derive_seed(master_seed, "theory", &[1]))
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents)?;
    Ok(())
}

/// Runs every arm of the experiment and writes its artifacts. A sweep puts
/// each arm under `<out>/<arm>/`; a single run writes directly into `<out>`.
pub fn run_experiment(cfg: ExperimentConfig) -> Result<RunSummary> {
    let env = std::env::var("FEDSDWC_OUT").ok();
    let mut cfg = cfg.resolve()?;
    let out = resolve_out_dir(&cfg, env.as_deref());
    cfg.out_dir = Some(out.clone());
    fs::create_dir_all(&out)?;
    write(&out.join("config.resolved.json"), &cfg.to_json()?)?;

    let data = build_datasets(&cfg)?;
    let bound = match &cfg.theory {
        Some(t) => {
            let report = run_theory(t, cfg.seed)?;
            write(&out.join("bound_report.csv"), &report.to_csv())?;
            write(&out.join("bound_report.json"), &to_pretty(&report, ARTIFACT_PRECISION)?)?;
            Some(report)
        }
        None => None,
    };

    let sweep = !cfg.arms.is_empty();
    let mut arms = Vec::new();
    for mode in cfg.arm_modes() {
        let mut arm_cfg = cfg.clone();
        arm_cfg.model.causal_mode = mode;
        arm_cfg.arms.clear();
        arm_cfg.theory = None;
        let dir = if sweep { out.join(mode.name()) } else { out.clone() };
        if sweep {
            arm_cfg.out_dir = Some(dir.clone());
            fs::create_dir_all(&dir)?;
            write(&dir.join("config.resolved.json"), &arm_cfg.to_json()?)?;
        }
        let scores = run_arm(&arm_cfg, &data, &dir)?;
        arms.push(ArmResult { arm: mode, dir, scores });
    }
    Ok(RunSummary { out_dir: out, arms, bound })
}

fn run_arm(cfg: &ExperimentConfig, data: &ExperimentData, dir: &Path) -> Result<ScoresFile> {
    let mut log = std::io::BufWriter::new(fs::File::create(dir.join("training_log.ndjson"))?);
    let mut sink = |r: &RoundRecord| -> Result<()> {
        log.write_all(to_line(r, ARTIFACT_PRECISION)?.as_bytes())?;
        log.write_all(b"\n")?;
        log.flush()?;
        Ok(())
    };
    let init = init_params(&cfg.model, derive_seed(cfg.federation.seed, "init", &[]))?;
    let trained = run_federation_streaming(&cfg.federation, init, &data.partition, &data.train, None, &mut sink)?;
    drop(sink);
    log.flush()?;

    let report = evaluate_suite(&trained.final_params, &data.eval_sets, &cfg.evaluation)?;
    save_checkpoint(&trained.final_params, &dir.join("checkpoint"))?;
    let scores = ScoresFile {
        arm: cfg.model.causal_mode.name().to_string(),
        name: cfg.name.clone(),
        seed: cfg.seed,
        mean_idc_acc: report.mean_idc_acc(),
        report,
    };
    write(&dir.join("scores.json"), &to_pretty(&scores, ARTIFACT_PRECISION)?)?;
    write(&dir.join("scores.csv"), &scores.report.to_csv())?;
    Ok(scores)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub run: String,
    pub arm: String,
    pub id_acc: f64,
    /// Unweighted mean of the `idc_acc` entries.
    pub mean_idc_acc: Option<f64>,
    pub detection: BTreeMap<String, Detection>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
}

pub fn compare_runs(dirs: &[PathBuf]) -> Result<Comparison> {
    if dirs.is_empty() {
        return Err(Error::validation("compare needs at least one run directory"));
    }
    let mut rows = Vec::with_capacity(dirs.len());
    for d in dirs {
        let path = d.join("scores.json");
        if !path.is_file() {
            return Err(Error::MissingFile(path));
        }
        let scores: ScoresFile = serde_json::from_str(&fs::read_to_string(&path)?)?;
        rows.push(ComparisonRow {
            run: d.display().to_string(),
            arm: scores.arm,
            id_acc: scores.report.id_acc,
            mean_idc_acc: scores.report.mean_idc_acc(),
            detection: scores.report.detection,
        });
    }
    Ok(Comparison { rows })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

impl Comparison {
    fn ood_sets(&self) -> BTreeSet<&str> {
        self.rows.iter().flat_map(|r| r.detection.keys().map(String::as_str)).collect()
    }

    fn cells(&self) -> Vec<Vec<String>> {
        let sets = self.ood_sets();
        let mut header = vec!["run".to_string(), "arm".into(), "id_acc".into(), "mean_idc_acc".into()];
        for s in &sets {
            header.push(format!("auroc/{s}"));
            header.push(format!("fpr95/{s}"));
        }
        let mut out = vec![header];
        for r in &self.rows {
            let mut row = vec![r.run.clone(), r.arm.clone(), r.id_acc.to_string(), opt(r.mean_idc_acc)];
            for s in &sets {
                let d = r.detection.get(*s);
                row.push(opt(d.map(|d| d.auroc)));
                row.push(opt(d.map(|d| d.fpr95)));
            }
            out.push(row);
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for row in self.cells() {
            let _ = writeln!(s, "{}", row.join(","));
        }
        s
    }

    /// Column-aligned plain-text table.
    pub fn to_table(&self) -> String {
        let cells = self.cells();
        let widths: Vec<usize> = (0..cells[0].len())
            .map(|c| cells.iter().map(|r| r[c].len()).max().unwrap_or(0))
            .collect();
        let mut s = String::new();
        for row in &cells {
            let line: Vec<String> = row.iter().zip(&widths).map(|(v, w)| format!("{v:<w$}")).collect();
            let _ = writeln!(s, "{}", line.join("  ").trim_end());
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PartitionStats {
    pub num_classes: usize,
    pub histograms: Vec<Vec<usize>>,
    /// Total-variation distance of each client's label distribution to the
    /// pooled one.
    pub tv_to_global: Vec<f64>,
}

impl PartitionStats {
    pub fn mean_tv(&self) -> f64 {
        self.tv_to_global.iter().sum::<f64>() / self.tv_to_global.len() as f64
    }

    pub fn to_table(&self) -> String {
        let mut s = String::from("client,size,tv");
        for j in 0..self.num_classes {
            let _ = write!(s, ",class_{j}");
        }
        s.push('\n');
        for (k, (h, tv)) in self.histograms.iter().zip(&self.tv_to_global).enumerate() {
            let counts: Vec<String> = h.iter().map(usize::to_string).collect();
            let _ = writeln!(s, "{k},{},{tv:.6},{}", h.iter().sum::<usize>(), counts.join(","));
        }
        s
    }
}

/// Class histograms of the training partition a config would use.
pub fn partition_stats(cfg: &ExperimentConfig) -> Result<PartitionStats> {
    let cfg = cfg.clone().resolve()?;
    let data = build_datasets(&cfg)?;
    Ok(stats_of(data.train.labels(), &data.partition, cfg.scm.num_classes))
}

fn stats_of(labels: &[i64], p: &PartitionSpec, num_classes: usize) -> PartitionStats {
    let all: Vec<usize> = (0..labels.len()).collect();
    let global = label_histogram(labels, &all, num_classes);
    let histograms: Vec<Vec<usize>> = p
        .client_indices
        .iter()
        .map(|idx| label_histogram(labels, idx, num_classes))
        .collect();
    let tv_to_global = histograms.iter().map(|h| total_variation(h, &global)).collect();
    PartitionStats {
        num_classes,
        histograms,
        tv_to_global,
    }
}
