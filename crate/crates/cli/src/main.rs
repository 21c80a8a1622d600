use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use driftlab_cli::check::library_schedule;
use driftlab_cli::{commands, CliError, ExperimentConfig};

#[derive(Debug, Parser)]
#[command(name = "driftlab", version, about = "Drift experiments on synthetic latent sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct Common {
    /// TOML experiment config; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the master seed (applied before hashing the config).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the invariant suite.
    Check {
        /// Replace the schedule with one that is nonzero at t = 0.
        #[arg(long, hide = true)]
        inject_schedule_fault: bool,
    },
    /// Codec round-trip error curve.
    RoundtripBench {
        #[command(flatten)]
        common: Common,
    },
    /// Train one field and write a checkpoint and loss curve.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Roll out a trained field on the held-out scenes.
    Rollout {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Compare the four presets; trains both fields unless checkpoints are given.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Field trained with plain flow-matching targets.
        #[arg(long)]
        fm: Option<PathBuf>,
        /// Field trained with restorative targets.
        #[arg(long)]
        rfm: Option<PathBuf>,
        /// Run presets on separate threads.
        #[arg(long)]
        parallel: bool,
    },
}

fn load(common: &Common) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn faulty_schedule(t: f64, beta: f64) -> driftlab::Result<f64> {
    Ok(library_schedule(t, beta)? + 0.01 * (1.0 - t))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Check { inject_schedule_fault } => {
            if inject_schedule_fault {
                commands::check(&faulty_schedule)?;
            } else {
                commands::check(&library_schedule)?;
            }
        }
        Command::RoundtripBench { common } => {
            let path = commands::roundtrip_bench(&load(&common)?, &common.out)?;
            println!("wrote {}", path.display());
        }
        Command::Train { common } => {
            commands::train(&load(&common)?, &common.out)?;
            println!("wrote {}", common.out.display());
        }
        Command::Rollout { common, checkpoint } => {
            commands::rollout(&load(&common)?, &checkpoint, &common.out)?;
        }
        Command::Ablate { common, fm, rfm, parallel } => {
            commands::ablate(&load(&common)?, fm.as_deref(), rfm.as_deref(), &common.out, parallel)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("driftlab: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
