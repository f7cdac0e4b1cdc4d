//! `eflanding` — experiment runner for compressed distributed optimization
//! on (block-wise) Stiefel manifolds.
//!
//! Subcommands: `run` (execute an experiment and write a metrics CSV),
//! `gen-data` (write a replayable binary dataset), `replay` (run against a
//! saved dataset), `estimate` (print resolved constants and schedules).
//! `(config, seed)` determines every output byte except wall-clock columns.

// Validation uses `!(x > 0.0)` on purpose: the negation also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod config;
mod csv;
mod runner;

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use config::Overrides;

#[derive(Parser)]
#[command(name = "eflanding", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct CommonArgs {
    /// Path to a TOML config; flags below override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    experiment: Option<String>,
    #[arg(long)]
    algorithm: Option<String>,
    #[arg(long)]
    error_feedback: Option<bool>,
    #[arg(long)]
    compressor: Option<String>,
    #[arg(long)]
    compressor_k: Option<usize>,
    #[arg(long)]
    compressor_ratio: Option<f64>,
    #[arg(long)]
    compressor_s: Option<u32>,
    #[arg(long)]
    seed_policy: Option<String>,
    /// Step size, or "auto".
    #[arg(long)]
    gamma: Option<String>,
    /// Momentum, or "auto".
    #[arg(long)]
    eta: Option<String>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    /// Clipping bound, or "estimate".
    #[arg(long)]
    grad_bound: Option<String>,
    /// Merit penalty weight, or "auto".
    #[arg(long)]
    mu: Option<String>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    p: Option<usize>,
    /// Rows per node.
    #[arg(long)]
    l: Option<usize>,
    #[arg(long)]
    nodes: Option<usize>,
    #[arg(long)]
    sigma_data: Option<f64>,
    #[arg(long)]
    sigma_noise: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    metrics_every: Option<usize>,
    /// Adds the Lyapunov/error-term/subspace-distance columns.
    #[arg(long)]
    diagnostics: Option<bool>,
    /// Worker parallelism (default: EFLANDING_THREADS or 1).
    #[arg(long)]
    threads: Option<usize>,
    /// Metrics CSV path (stdout when omitted).
    #[arg(long)]
    output: Option<String>,
    #[arg(long)]
    penalty_lambda: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Runs the configured experiment and writes the metrics CSV.
    Run(CommonArgs),
    /// Generates the configured dataset and writes it as binary.
    GenData {
        #[command(flatten)]
        common: CommonArgs,
        /// Output dataset path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-runs an experiment against a saved dataset.
    Replay {
        #[command(flatten)]
        common: CommonArgs,
        /// Dataset written by gen-data; its header must match the config.
        #[arg(long)]
        data: PathBuf,
    },
    /// Prints resolved constants and schedules without running.
    Estimate(CommonArgs),
}

impl CommonArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            experiment: self.experiment.clone(),
            algorithm: self.algorithm.clone(),
            error_feedback: self.error_feedback,
            compressor: self.compressor.clone(),
            compressor_k: self.compressor_k,
            compressor_ratio: self.compressor_ratio,
            compressor_s: self.compressor_s,
            seed_policy: self.seed_policy.clone(),
            gamma: self.gamma.clone(),
            eta: self.eta.clone(),
            lambda: self.lambda,
            epsilon: self.epsilon,
            grad_bound: self.grad_bound.clone(),
            mu: self.mu.clone(),
            n: self.n,
            p: self.p,
            l: self.l,
            nodes: self.nodes,
            sigma_data: self.sigma_data,
            sigma_noise: self.sigma_noise,
            batch_size: self.batch_size,
            iters: self.iters,
            seed: self.seed,
            metrics_every: self.metrics_every,
            diagnostics: self.diagnostics,
            threads: self.threads.or_else(|| {
                std::env::var("EFLANDING_THREADS")
                    .ok()
                    .and_then(|v| v.parse().ok())
            }),
            output: self.output.clone(),
            penalty_lambda: self.penalty_lambda,
        }
    }

    fn load(&self) -> Result<config::RunConfig> {
        let text = match &self.config {
            Some(path) => fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?,
            None => String::new(),
        };
        config::parse_config(&text, &self.overrides())
    }
}

fn write_output(csv: &str, output: &Option<String>) -> Result<()> {
    match output {
        Some(path) => {
            fs::write(path, csv).with_context(|| format!("writing {path}"))?;
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run(common) => {
            let config = common.load()?;
            let outcome = runner::execute(&config, None)?;
            write_output(&outcome.csv, &config.output)?;
            if outcome.diverged {
                eprintln!("run diverged; metrics truncated at the flagged record");
                return Ok(ExitCode::from(2));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::GenData { common, out } => {
            let config = common.load()?;
            runner::gen_data(&config, &out)?;
            eprintln!("wrote dataset to {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Replay { common, data } => {
            let config = common.load()?;
            let outcome = runner::execute(&config, Some(&data))?;
            write_output(&outcome.csv, &config.output)?;
            if outcome.diverged {
                eprintln!("run diverged; metrics truncated at the flagged record");
                return Ok(ExitCode::from(2));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Estimate(common) => {
            let config = common.load()?;
            print!("{}", runner::estimate(&config)?);
            Ok(ExitCode::SUCCESS)
        }
    }
}
