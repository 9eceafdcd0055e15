use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedsdwc::experiment::{
    compare_runs, json, partition_stats, run_experiment, run_theory, ExperimentConfig, Overrides, TheorySection,
};
use fedsdwc::model::CausalMode;

#[derive(Parser)]
#[command(name = "fedsdwc", version, about = "Federated causal generative modelling experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train, evaluate and write artifacts for an experiment config.
    Run(RunArgs),
    /// Tabulate the scores of finished runs.
    Compare(CompareArgs),
    /// Check the generalization bound on linear-Gaussian instances.
    VerifyBound(BoundArgs),
    /// Print per-client class histograms of a config's partition.
    PartitionStats(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (JSON). Defaults to the built-in smoke config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    clients: Option<usize>,
    #[arg(long)]
    concentration: Option<f64>,
    #[arg(long)]
    intervention_scale: Option<f64>,
    #[arg(long, value_parser = parse_mode)]
    causal_mode: Option<CausalMode>,
    #[arg(long)]
    local_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    /// Also write the table as CSV to this path.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct BoundArgs {
    /// Take defaults from this config's `theory` section.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated noise levels.
    #[arg(long, value_delimiter = ',')]
    sigma_grid: Option<Vec<f64>>,
    #[arg(long)]
    prior_gap: Option<f64>,
    #[arg(long)]
    num_x: Option<usize>,
    #[arg(long)]
    dim_v: Option<usize>,
    #[arg(long)]
    clients: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for `bound_report.csv` and `bound_report.json`.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_mode(s: &str) -> Result<CausalMode, String> {
    s.parse().map_err(|e: fedsdwc::Error| e.to_string())
}

impl RunArgs {
    fn load(&self) -> fedsdwc::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::smoke(),
        };
        cfg.apply(&Overrides {
            out: self.out.clone(),
            seed: self.seed,
            rounds: self.rounds,
            clients: self.clients,
            concentration: self.concentration,
            intervention_scale: self.intervention_scale,
            causal_mode: self.causal_mode,
            local_epochs: self.local_epochs,
            batch_size: self.batch_size,
            lr: self.lr,
        });
        Ok(cfg)
    }
}

fn run(args: RunArgs) -> fedsdwc::Result<()> {
    let summary = run_experiment(args.load()?)?;
    println!("wrote {}", summary.out_dir.display());
    for a in &summary.arms {
        let idc = a.scores.mean_idc_acc.map_or("n/a".to_string(), |v| format!("{v:.4}"));
        println!("{:<7} id_acc {:.4}  mean_idc_acc {idc}", a.arm.name(), a.scores.report.id_acc);
    }
    if let Some(b) = &summary.bound {
        let ok = b.all_small_regime_checks_pass() && b.check_b != Some(false);
        println!("bound checks {}", if ok { "pass" } else { "fail" });
    }
    Ok(())
}

fn compare(args: CompareArgs) -> fedsdwc::Result<()> {
    let table = compare_runs(&args.runs)?;
    print!("{}", table.to_table());
    if let Some(p) = args.csv {
        std::fs::write(p, table.to_csv())?;
    }
    Ok(())
}

fn verify_bound(args: BoundArgs) -> fedsdwc::Result<()> {
    let base = match &args.config {
        Some(p) => Some(ExperimentConfig::load(p)?),
        None => None,
    };
    let seed = args.seed.or(base.as_ref().map(|c| c.seed)).unwrap_or(0);
    let mut t = base.and_then(|c| c.theory).unwrap_or(TheorySection {
        sigma_grid: vec![0.0, 0.01, 0.02, 0.05, 0.1],
        prior_gap: 0.2,
        num_x: 20_000,
        dim_v: 2,
        num_clients: 2,
    });
    if let Some(v) = args.sigma_grid {
        t.sigma_grid = v;
    }
    if let Some(v) = args.prior_gap {
        t.prior_gap = v;
    }
    if let Some(v) = args.num_x {
        t.num_x = v;
    }
    if let Some(v) = args.dim_v {
        t.dim_v = v;
    }
    if let Some(v) = args.clients {
        t.num_clients = v;
    }
    let report = run_theory(&t, seed)?;
    print!("{}", report.to_csv());
    if let Some(dir) = args.out {
        std::fs::create_dir_all(&dir)?;
        std::fs::write(dir.join("bound_report.csv"), report.to_csv())?;
        std::fs::write(
            dir.join("bound_report.json"),
            json::to_pretty(&report, json::Precision::Significant(json::FLOAT_DIGITS))?,
        )?;
    }
    if report.all_small_regime_checks_pass() && report.check_b != Some(false) {
        Ok(())
    } else {
        Err(fedsdwc::Error::Validation("bound check failed".into()))
    }
}

fn stats(args: RunArgs) -> fedsdwc::Result<()> {
    let s = partition_stats(&args.load()?)?;
    print!("{}", s.to_table());
    println!("mean_tv,{:.6}", s.mean_tv());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::Compare(a) => compare(a),
        Command::VerifyBound(a) => verify_bound(a),
        Command::PartitionStats(a) => stats(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
