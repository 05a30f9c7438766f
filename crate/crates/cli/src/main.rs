use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use ols_core::experiment::{
    cmd_collect, cmd_evaluate, cmd_report, cmd_simulate, cmd_train_encoder, preset, render_report,
    ExperimentConfig, PRESET_NAMES,
};

/// Offline learner simulation experiments.
#[derive(Debug, Parser)]
#[command(name = "ols", version, about)]
struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in configuration to start from.
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Output directory (overrides the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Base seed for simulation runs (overrides simulation.seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Parallel simulation workers (overrides simulation.jobs).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Roll the behavior policy and write the logged dataset.
    Collect,
    /// Train the latent encoder on a split of the dataset.
    TrainEncoder,
    /// Run every strategy and seed, skipping completed runs.
    Simulate,
    /// Compute fidelity and efficiency from the recorded curves.
    Evaluate,
    /// Print the summary table.
    Report,
    /// Print the effective configuration as TOML.
    PrintDefaults,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match (&cli.config, &cli.preset) {
        (Some(path), _) => ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        (None, Some(name)) => preset(name)?,
        (None, None) => ExperimentConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.simulation.seed = seed;
    }
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            bail!("--jobs must be at least 1");
        }
        cfg.simulation.jobs = jobs;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<ExitCode> {
    let cfg = load_config(cli)?;
    match cli.command {
        Command::PrintDefaults => {
            println!("# presets: {}", PRESET_NAMES.join(", "));
            print!("{}", cfg.to_toml_string()?);
        }
        Command::Collect => {
            let path = cmd_collect(&cfg)?;
            println!("dataset written to {}", path.display());
        }
        Command::TrainEncoder => {
            let (path, artifacts) = cmd_train_encoder(&cfg)?;
            let best = &artifacts.training[artifacts.selected];
            println!(
                "encoder written to {} (validation loss {:.4} at epoch {}, {} latents used)",
                path.display(),
                best.best_validation_loss,
                best.best_epoch,
                best.used_latents
            );
        }
        Command::Simulate => {
            let summary = cmd_simulate(&cfg)?;
            println!(
                "{} runs planned, {} executed, {} already complete, {} failed",
                summary.planned,
                summary.executed,
                summary.skipped,
                summary.failed.len()
            );
            for (id, err) in &summary.failed {
                eprintln!("run {id} failed: {err}");
            }
            if !summary.failed.is_empty() {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Evaluate => {
            let ev = cmd_evaluate(&cfg)?;
            print!("{}", render_report(&ev));
        }
        Command::Report => print!("{}", cmd_report(&cfg)?),
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
