//! Command-line front end for the experiment harness.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use stochgp::data::write_csv;
use stochgp::experiment::{
    assemble_table, default_out_dir, gen_synthetic, grid_search, run_checks, run_experiment,
    ExperimentConfig, RunRecord, SynthMapKind, SyntheticSpec, TableMetric, OUT_DIR_ENV,
};
use stochgp::Result;

#[derive(Parser)]
#[command(
    name = "stochgp",
    version,
    about = "Stochastic hyperparameter learning for feature-map GPs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train once at a single learning rate.
    Run(ConfigArgs),
    /// Train at every rate of the grid and keep the best.
    Grid(ConfigArgs),
    /// Write a synthetic dataset as CSV (target column `y`).
    Synth(SynthArgs),
    /// Merge run records into a dataset × batch-size table.
    Table(TableArgs),
    /// Run the built-in numerical self-checks.
    Check {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// Key-value or JSON config file (a run record's JSON also works).
    #[arg(long)]
    config: Option<PathBuf>,
    /// CSV dataset path.
    #[arg(long)]
    data: Option<String>,
    /// Target column, by name or zero-based index.
    #[arg(long)]
    target: Option<String>,
    /// identity | linear:D | mlp:H1,H2 | rff:D | mlp-rff:H1,H2:D
    #[arg(long)]
    features: Option<String>,
    /// minimax | scgd | bsgd
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    /// Comma-separated learning rates.
    #[arg(long)]
    grid: Option<String>,
    /// constant | polynomial
    #[arg(long)]
    schedule: Option<String>,
    #[arg(long)]
    b_t: Option<String>,
    #[arg(long)]
    mu: Option<String>,
    #[arg(long)]
    sigma_min: Option<String>,
    #[arg(long)]
    zeta_max: Option<String>,
    /// sgd | adam
    #[arg(long)]
    step_rule: Option<String>,
    /// with_replacement | epoch
    #[arg(long)]
    sampling: Option<String>,
    #[arg(long)]
    split_seed: Option<String>,
    #[arg(long)]
    init_seed: Option<String>,
    #[arg(long)]
    batch_seed: Option<String>,
    /// Any other config field, as `key=value`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory; defaults to the config's `output` or the environment.
    #[arg(long, env = OUT_DIR_ENV)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 512)]
    n: usize,
    #[arg(long, default_value_t = 8)]
    p: usize,
    #[arg(long, default_value_t = 8)]
    d: usize,
    #[arg(long, default_value_t = 0.1)]
    sigma2: f64,
    /// linear | mlp | rff
    #[arg(long, default_value = "linear")]
    map: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TableArgs {
    /// Run-record JSON files or directories containing them.
    inputs: Vec<PathBuf>,
    /// nll | rmse | rmse_learned_w
    #[arg(long, default_value = "nll")]
    metric: String,
    #[arg(long)]
    csv: bool,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<(ExperimentConfig, PathBuf)> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::from_file(path)?,
            None => ExperimentConfig::default(),
        };
        let flags = [
            ("data", &self.data),
            ("target", &self.target),
            ("features", &self.features),
            ("optimizer", &self.optimizer),
            ("batch_size", &self.batch_size),
            ("epochs", &self.epochs),
            ("learning_rate", &self.lr),
            ("lr_grid", &self.grid),
            ("schedule", &self.schedule),
            ("b_t", &self.b_t),
            ("mu", &self.mu),
            ("sigma_min", &self.sigma_min),
            ("zeta_max", &self.zeta_max),
            ("step_rule", &self.step_rule),
            ("sampling", &self.sampling),
            ("split_seed", &self.split_seed),
            ("init_seed", &self.init_seed),
            ("batch_seed", &self.batch_seed),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| stochgp::Error::Config(format!("`--set {kv}` is not key=value")))?;
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        let out = self
            .out
            .clone()
            .or_else(|| cfg.output.clone())
            .unwrap_or_else(default_out_dir);
        Ok((cfg, out))
    }
}

fn summarize(record: &RunRecord, path: &Path) {
    let rmse = record
        .test_rmse
        .map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
    println!(
        "{}  lr={:e}  best_nll={:.5}  best_epoch={}  test_rmse={}  -> {}",
        record.config.optimizer,
        record.learning_rate,
        record.best_nll,
        record
            .best_epoch
            .map_or_else(|| "-".to_string(), |e| e.to_string()),
        rmse,
        path.display()
    );
    if let Some(reason) = &record.divergence {
        println!("  diverged: {reason}");
    }
}

fn collect_records(inputs: &[PathBuf]) -> Result<Vec<RunRecord>> {
    let mut paths = Vec::new();
    for input in inputs {
        if input.is_dir() {
            let entries = std::fs::read_dir(input).map_err(|e| stochgp::Error::Io {
                path: input.clone(),
                source: e,
            })?;
            for entry in entries.flatten() {
                let p = entry.path();
                if p.extension().is_some_and(|e| e == "json") {
                    paths.push(p);
                }
            }
        } else {
            paths.push(input.clone());
        }
    }
    paths.sort();
    paths.iter().map(|p| RunRecord::read(p)).collect()
}

fn execute(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Run(args) => {
            let (cfg, out) = args.resolve()?;
            let record = run_experiment(&cfg)?;
            let path = record.write(&out)?;
            summarize(&record, &path);
            Ok(true)
        }
        Command::Grid(args) => {
            let (cfg, out) = args.resolve()?;
            let result = grid_search(&cfg)?;
            for record in &result.runs {
                let path = record.write(&out)?;
                summarize(record, &path);
            }
            println!(
                "best rate {:e} (best_nll {:.5})",
                result.best_rate, result.best.best_nll
            );
            Ok(true)
        }
        Command::Synth(args) => {
            let spec = SyntheticSpec {
                n: args.n,
                p: args.p,
                d: args.d,
                sigma2: args.sigma2,
                map: args.map.parse::<SynthMapKind>()?,
                seed: args.seed,
            };
            let (data, _) = gen_synthetic(&spec)?;
            write_csv(&args.out, &data, "y")?;
            println!("wrote {} rows to {}", data.len(), args.out.display());
            Ok(true)
        }
        Command::Table(args) => {
            let metric: TableMetric = args.metric.parse()?;
            let records = collect_records(&args.inputs)?;
            let table = assemble_table(&records, metric);
            if args.csv {
                print!("{}", table.to_csv());
            } else {
                print!("{}", table.to_markdown());
            }
            Ok(true)
        }
        Command::Check { seed } => {
            let outcomes = run_checks(seed);
            let mut all = true;
            for c in &outcomes {
                println!(
                    "[{}] {}: {}",
                    if c.passed { "pass" } else { "FAIL" },
                    c.name,
                    c.detail
                );
                all &= c.passed;
            }
            Ok(all)
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
