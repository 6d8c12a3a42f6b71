mod config;
mod experiments;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::Parser;
use serde_json::json;

use config::{Experiment, ExperimentConfig};
use experiments::RunError;

/// Runs uRBM dynamics experiments and writes CSV/JSON artifacts.
#[derive(Parser, Debug)]
#[command(name = "urbm-dyn", version)]
struct Cli {
    /// Experiment to run.
    #[arg(value_enum)]
    experiment: Experiment,

    /// JSON config file (flat dotted keys or nested objects).
    #[arg(long)]
    config: Option<PathBuf>,

    /// Override a config key; the value is parsed as JSON when possible.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Output directory.
    #[arg(long)]
    out: PathBuf,

    /// Base RNG seed.
    #[arg(long)]
    seed: Option<u64>,

    /// Worker threads for trajectory ensembles (falls back to URBM_DYN_WORKERS, then 1).
    #[arg(long)]
    workers: Option<usize>,
}

fn workers(flag: Option<usize>) -> Result<usize, String> {
    let n = match flag {
        Some(n) => n,
        None => match std::env::var("URBM_DYN_WORKERS") {
            Ok(v) => v.trim().parse().map_err(|_| format!("URBM_DYN_WORKERS: expected a positive integer, got '{v}'"))?,
            Err(_) => 1,
        },
    };
    if n == 0 {
        return Err("workers: must be at least 1".into());
    }
    Ok(n)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let started = Instant::now();

    let cfg = match ExperimentConfig::load(cli.experiment, cli.config.as_deref(), &cli.set, cli.seed) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("urbm-dyn: {e}");
            return ExitCode::from(2);
        }
    };
    let n_workers = match workers(cli.workers) {
        Ok(n) => n,
        Err(e) => {
            eprintln!("urbm-dyn: {e}");
            return ExitCode::from(2);
        }
    };

    let outputs = match experiments::run(&cfg, n_workers) {
        Ok(o) => o,
        Err(RunError::Config(msg)) => {
            eprintln!("urbm-dyn: {msg}");
            return ExitCode::from(2);
        }
        Err(RunError::Numerical(msg)) => {
            eprintln!("urbm-dyn: {msg}");
            output::Outputs { failure: Some(msg), ..Default::default() }
        }
    };

    let metadata = json!({
        "experiment": cfg.experiment.as_str(),
        "config": cfg.echo(),
        "version": env!("CARGO_PKG_VERSION"),
        "wall_time_s": started.elapsed().as_secs_f64(),
        "workers": n_workers,
        "solver_path_counts": outputs.path_counts,
        "ite_sign": outputs.ite_sign.unwrap_or(experiments::ite_sign()),
        "rng": urbm_core::RNG_ID,
        "seed": cfg.seed,
        "status": if outputs.failure.is_some() { "failed" } else { "ok" },
        "error": outputs.failure,
        "results": outputs.results,
    });
    if let Err(e) = output::write_outputs(&cli.out, &outputs, &metadata) {
        eprintln!("urbm-dyn: writing {}: {e}", cli.out.display());
        return ExitCode::from(1);
    }
    if let Some(f) = &outputs.failure {
        eprintln!("urbm-dyn: run failed: {f}");
        return ExitCode::from(1);
    }
    ExitCode::SUCCESS
}
