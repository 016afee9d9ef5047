//! `qsoc`: config-driven experiments over the simulation kernels.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{ExperimentConfig, Overrides};

/// Error classes that decide the exit code.
#[derive(Debug, thiserror::Error)]
pub enum Failure {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Io(String),
}

impl Failure {
    pub fn io(e: std::io::Error) -> Self {
        Failure::Io(e.to_string())
    }

    pub fn from_core(e: qsoc_core::Error) -> Self {
        if e.is_io() {
            Failure::Io(e.to_string())
        } else {
            Failure::Config(e.to_string())
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "qsoc", version, about = "Spin-qubit array simulator and analysis toolkit")]
struct Cli {
    /// TOML experiment file; flags take precedence over its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fully connected fraction versus tunability ratio (pc_curve.csv).
    PcSweep,
    /// Register emitters from a frame stack (lookup_table.json, stats.csv).
    Registry {
        /// Load frames from this directory instead of synthesizing them.
        #[arg(long)]
        frames: Option<PathBuf>,
    },
    /// Post-selection sweep and mixture fit (spam_sweep.csv, fit_report.json).
    Spam {
        /// Read `shot,bin1,bin2,bin3` records instead of simulating them.
        #[arg(long)]
        records: Option<PathBuf>,
    },
    /// Photon detection and Purcell budget (budget.json).
    Budget,
    /// Qubit and link count estimates (scaling.csv).
    Scaling,
    /// Write a synthetic frame stack and its ground truth.
    SynthFrames,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let ov = Overrides {
        seed: cli.seed,
        out: cli.out,
        threads: cli.threads,
    };
    let mut cfg = ExperimentConfig::load(cli.config.as_deref(), &ov)?;
    match &cli.command {
        Command::Registry { frames: Some(f) } => cfg.registry.frames_dir = Some(f.clone()),
        Command::Spam { records: Some(r) } => cfg.spam.records = Some(r.clone()),
        _ => {}
    }
    commands::derive_module_seeds(&mut cfg)?;
    if let Some(n) = cfg.threads {
        if n == 0 {
            return Err(Failure::Config("threads must be >= 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Config(e.to_string()))?;
    }
    match cli.command {
        Command::PcSweep => commands::pc_sweep_cmd(&cfg),
        Command::Registry { .. } => commands::registry_cmd(&cfg),
        Command::Spam { .. } => commands::spam_cmd(&cfg),
        Command::Budget => commands::budget_cmd(&cfg),
        Command::Scaling => commands::scaling_cmd(&cfg),
        Command::SynthFrames => commands::synth_frames_cmd(&cfg),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Failure>() {
        Some(Failure::Io(_)) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
