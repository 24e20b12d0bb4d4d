//! `retarget`: calibrate, preprocess, train, export, evaluate and plot.

mod commands;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "retarget", version, about = "Physics-aware motion retargeting")]
struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true, default_value = "retarget.toml")]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Checkpoint to resume training from, or to export with.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Writes a complete toy experiment (morphologies, clips, config) into DIR.
    MakeToy { dir: PathBuf },
    /// Computes the global scale and per-pair nominal offsets.
    Calibrate,
    /// Records per-clip vertical offsets and fills missing velocities.
    Preprocess,
    /// Trains the tracking policy and, unless disabled, the mapping parameters.
    Train {
        /// Keeps the mapping parameters at their nominal values.
        #[arg(long)]
        no_bilevel: bool,
    },
    /// Plays every clip with the trained policy and writes target clips.
    Retarget,
    /// Evaluates retargeted clips against their source contacts.
    Eval {
        /// Manifest of retargeted clips; defaults to the one `retarget` writes.
        trajectories: Option<PathBuf>,
    },
    /// Draws reward, upper loss and update rate curves of a training log as SVG.
    Plot {
        /// Training log; defaults to the one `train` writes.
        log: Option<PathBuf>,
    },
}

/// Exit code 2 for numerical faults during computation, 1 for everything
/// else (configuration, validation, input and output errors).
fn exit_code(err: &anyhow::Error) -> u8 {
    let numerical = err
        .chain()
        .any(|e| matches!(e.downcast_ref::<retarget_core::Error>(), Some(retarget_core::Error::Numerical(_))));
    if numerical {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn numerical_faults_map_to_exit_code_two() {
        let e = anyhow::Error::new(retarget_core::Error::Numerical("nan".into())).context("training");
        assert_eq!(exit_code(&e), 2);
        let e = anyhow::Error::new(retarget_core::Error::Config("bad".into()));
        assert_eq!(exit_code(&e), 1);
        assert_eq!(exit_code(&anyhow::anyhow!("other")), 1);
    }
}
