//! `lvr`: generate demonstrations, train BC/LVR policies, evaluate them and
//! analyze their closed-loop stability and latent geometry.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on usage or
//! configuration errors (including missing prerequisite artifacts).

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lvr_core::{LvrError, Method};

/// Usage, configuration or missing-prerequisite error (exit code 2).
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Debug, Parser)]
#[command(name = "lvr", version, about = "Latent variation regularized imitation learning experiments")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override the root seed from the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Override the output directory from the config.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for parallel rollouts and sweeps (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TrainMethod {
    Bc,
    Lvr,
}

impl TrainMethod {
    pub fn method(self) -> Method {
        match self {
            TrainMethod::Bc => Method::Bc,
            TrainMethod::Lvr => Method::Lvr,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AnyMethod {
    Expert,
    Bc,
    Lvr,
}

impl AnyMethod {
    pub fn method(self) -> Method {
        match self {
            AnyMethod::Expert => Method::Expert,
            AnyMethod::Bc => Method::Bc,
            AnyMethod::Lvr => Method::Lvr,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    /// Training-set size.
    Size,
    /// Environment perturbation level.
    Perturbation,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Roll out the expert and write the demonstration dataset.
    Generate,
    /// Train a policy on the generated dataset.
    Train {
        #[arg(long, value_enum)]
        method: TrainMethod,
    },
    /// Evaluate a checkpoint (or the expert) over randomized rollouts.
    Eval {
        /// Checkpoint file; defaults to the one written by `train --method`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        method: Option<AnyMethod>,
    },
    /// Return-map, latent-geometry and sweep analyses.
    Analyze {
        #[command(subcommand)]
        what: AnalyzeCommand,
    },
}

#[derive(Debug, Subcommand)]
enum AnalyzeCommand {
    /// Fixed point and linearized return map of the closed loop.
    Poincare {
        #[arg(long, value_enum, default_value = "lvr")]
        method: AnyMethod,
    },
    /// Principal directions of consecutive latent differences on the dataset.
    Latent {
        #[arg(long, value_enum, default_value = "lvr")]
        method: TrainMethod,
    },
    /// Train and evaluate every method over seeds along one axis.
    Sweep {
        #[arg(long, value_enum, default_value = "size")]
        axis: Axis,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(jobs) = cli.common.jobs {
        if jobs == 0 {
            return Err(UsageError("--jobs must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global()?;
    }
    let ctx = commands::Context::load(&cli.common)?;
    match cli.command {
        Command::Generate => commands::generate(&ctx),
        Command::Train { method } => commands::train(&ctx, method.method()),
        Command::Eval { checkpoint, method } => commands::eval(&ctx, checkpoint, method.map(AnyMethod::method)),
        Command::Analyze { what } => match what {
            AnalyzeCommand::Poincare { method } => commands::poincare(&ctx, method.method()),
            AnalyzeCommand::Latent { method } => commands::latent(&ctx, method.method()),
            AnalyzeCommand::Sweep { axis } => commands::sweep(&ctx, axis),
        },
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    match err.downcast_ref::<LvrError>() {
        Some(LvrError::Config(_)) | Some(LvrError::InvalidParameter(_)) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
