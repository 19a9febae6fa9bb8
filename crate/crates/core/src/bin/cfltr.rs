use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cfltr::experiment::{self, ExperimentConfig, ExperimentError, Overrides};
use cfltr::{Method, OptimizerKind};

#[derive(Parser)]
#[command(name = "cfltr", version, about = "Counterfactual learning to rank from simulated click logs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train logging policies and write click logs plus M / M̄ statistics.
    Simulate(Common),
    /// Run every configured cell and write learning curves and regret summaries.
    Train(Common),
    /// Tune the learning rate per cell and report every grid value's regret.
    Grid(Common),
    /// Compare IPS-weighted SGD and CounterSample on the 2-d toy problem.
    Toy(Common),
    /// Print M, M̄ and a histogram of 1/p for a click-log file.
    Stats {
        /// JSONL click log written by `simulate`.
        path: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    /// JSON experiment config; built-in defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long, value_parser = parse_method)]
    method: Option<Method>,
    #[arg(long, value_parser = parse_optimizer)]
    optimizer: Option<OptimizerKind>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Fixed learning rate instead of a grid search.
    #[arg(long)]
    eta: Option<f64>,
    /// Number of clicks to simulate.
    #[arg(long)]
    clicks: Option<usize>,
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse()
}

fn parse_optimizer(s: &str) -> Result<OptimizerKind, String> {
    s.parse()
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig, ExperimentError> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        cfg.apply(&Overrides {
            out_dir: self.out.clone(),
            seed: self.seed,
            workers: self.workers,
            gamma: self.gamma,
            method: self.method,
            optimizer: self.optimizer,
            batch_size: self.batch_size,
            eta: self.eta,
            clicks: self.clicks,
        });
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<(), ExperimentError> {
    match cli.command {
        Command::Simulate(c) => {
            let cfg = c.resolve()?;
            for row in experiment::cmd_simulate(&cfg)? {
                println!(
                    "gamma {} seed {}: M = {:.2}, M̄ = {:.2}, M/M̄ = {:.2}",
                    row.gamma, row.seed, row.m, row.m_bar, row.ratio
                );
            }
            println!("wrote {}", cfg.out_dir.display());
        }
        Command::Train(c) => {
            let cfg = c.resolve()?;
            let summary = experiment::cmd_train(&cfg)?;
            for table in summary.tables.iter().filter(|t| t.split == "test") {
                println!("regret x100 (test), gamma {}, batch {}", table.gamma, table.batch_size);
                let header: Vec<&str> = table.columns.iter().map(|o| o.name()).collect();
                println!("  {:<16}{}", "", header.iter().map(|h| format!("{h:>10}")).collect::<String>());
                for row in &table.rows {
                    let vals: String = row
                        .values
                        .iter()
                        .map(|v| match v {
                            Some(x) => format!("{x:>10.3}"),
                            None => format!("{:>10}", "-"),
                        })
                        .collect();
                    println!("  {:<16}{vals}", row.method.name());
                }
            }
            println!("wrote {}", cfg.out_dir.display());
        }
        Command::Grid(c) => {
            let cfg = c.resolve()?;
            for r in experiment::cmd_grid(&cfg)? {
                println!(
                    "{} {} b{} g{} s{}: best eta {}",
                    r.method.name(),
                    r.optimizer.name(),
                    r.batch_size,
                    r.gamma,
                    r.seed,
                    r.best_eta.map(|e| format!("{e:e}")).unwrap_or_else(|| "-".into())
                );
            }
            println!("wrote {}", cfg.out_dir.display());
        }
        Command::Toy(c) => {
            let cfg = c.resolve()?;
            let report = experiment::cmd_toy(&cfg)?;
            for row in &report.rows {
                let d = row
                    .mean_final_distance
                    .map(|d| format!("{d:.4}"))
                    .unwrap_or_else(|| format!("diverged in {} seeds", row.diverged_seeds));
                println!("{:<16} eta {:<8} mean final distance {d}", row.method.name(), row.eta);
            }
            println!("wrote {}", cfg.out_dir.display());
        }
        Command::Stats { path } => print!("{}", experiment::cmd_stats(&path)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
