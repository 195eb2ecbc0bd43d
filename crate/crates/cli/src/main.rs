//! `bootdistill`: multi-stage distillation runs, evaluation and analysis.

mod commands;
mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use bootdistill::checkpoint::Role;
use bootdistill::probe::ProbeMode;
use bootdistill::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "bootdistill", version, about = "Bootstrapped masked distillation for vision transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every command.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overrides the environment and the config.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Base seed; overrides the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Validate the configuration and exit without writing anything.
    #[arg(long)]
    pub validate_only: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run (or resume) the multi-stage pipeline.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Resume from `stage_<k>.ckpt` in the output directory.
        #[arg(long)]
        stage: Option<usize>,
        /// Resume from this pipeline checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Probe or fine-tune a checkpoint and append the accuracy to summary.csv.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "linear_probe")]
        mode: ProbeMode,
        #[arg(long, value_enum, default_value = "student")]
        role: RoleArg,
    },
    /// Attention distance, feature spectrum or unsupervised localization.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        which: Analysis,
        #[arg(long, value_enum, default_value = "student")]
        role: RoleArg,
        /// Number of validation images to analyze.
        #[arg(long, default_value_t = 64)]
        images: usize,
        /// Largest k of the spectrum report.
        #[arg(long, default_value_t = 5)]
        max_k: usize,
        /// Also write an SVG plot next to the CSV.
        #[arg(long)]
        plot: bool,
    },
    /// Check an external teacher against the config and store it in the output directory.
    ImportTeacher {
        #[command(flatten)]
        common: Common,
        /// A checkpoint holding an encoder, or a feature bank.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "student")]
        role: RoleArg,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Analysis {
    AttnDist,
    Svd,
    Localize,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum RoleArg {
    Student,
    Teacher,
}

impl From<RoleArg> for Role {
    fn from(r: RoleArg) -> Self {
        match r {
            RoleArg::Student => Role::Student,
            RoleArg::Teacher => Role::Teacher,
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Dimension { .. } | Error::Shape(_) | Error::State(_) => 2,
        Error::Data(_) | Error::Io { .. } | Error::Format(_) | Error::Degenerate(_) => 3,
        Error::Numeric(_) => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Pretrain { common, stage, checkpoint } => commands::pretrain(&common, stage, checkpoint.as_deref()),
        Command::Evaluate { common, checkpoint, mode, role } => {
            commands::evaluate(&common, &checkpoint, mode, role.into())
        }
        Command::Analyze { common, checkpoint, which, role, images, max_k, plot } => {
            commands::analyze(&common, &checkpoint, which, role.into(), images, max_k, plot)
        }
        Command::ImportTeacher { common, input, role } => commands::import_teacher(&common, &input, role.into()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
