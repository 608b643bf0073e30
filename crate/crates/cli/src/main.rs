mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "ect", version, about = "Consistency tuning and distillation on toy data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    /// Denoising regression (r = 0).
    Pretrain,
    /// Consistency tuning with shared-noise pairs.
    Ect,
    /// Consistency distillation from a frozen teacher.
    Ecd,
    /// Distillation on clean samples generated by the student itself.
    EcdDatafree,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Pretrain => "pretrain",
            Mode::Ect => "ect",
            Mode::Ecd => "ecd",
            Mode::EcdDatafree => "ecd-datafree",
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoints and metrics under the run directory.
    Train {
        config: PathBuf,
        #[arg(long, value_enum)]
        mode: Mode,
        /// Pretrain: continue from the last pretraining checkpoint.
        /// Other modes: initialize from the pretraining checkpoint's EMA weights.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Draw samples from a checkpoint with the configured sampling plan.
    Sample {
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score 1-step and planned samples against held-out data.
    Eval {
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Fit metric = K·compute^alpha to a two-column CSV.
    FitScaling { points: PathBuf },
    /// Check the closed-form Gaussian identities numerically.
    OracleCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Tune once per weighting combination and tabulate the results.
    Sweep {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train {
            config,
            mode,
            resume,
            seed,
        } => commands::train(&config, mode, resume, seed),
        Command::Sample {
            config,
            checkpoint,
            steps,
            n,
            seed,
        } => commands::sample(&config, checkpoint.as_deref(), steps, n, seed),
        Command::Eval { config, checkpoint } => commands::eval(&config, checkpoint.as_deref()),
        Command::FitScaling { points } => commands::fit_scaling(&points),
        Command::OracleCheck { seed } => commands::oracle_check(seed),
        Command::Sweep { config, seed } => commands::sweep(&config, seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.record());
            ExitCode::from(e.code())
        }
    }
}
