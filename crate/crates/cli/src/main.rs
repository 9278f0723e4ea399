//! `unetmm`: memory analysis, training, evaluation and feature diagnostics.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use unetmm::arch::SkipMode;

use config::Overrides;

#[derive(Parser, Debug)]
#[command(name = "unetmm", version, about = "U-Net skip-connection memory analysis and training")]
struct Cli {
    /// Print progress (training rows, per-case gradcheck results).
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Peak skip-feature memory per skip mode, plus the Full vs MSIAM+IEM comparison.
    AnalyzeMemory(Common),
    /// Train on synthetic denoising pairs; writes a checkpoint and metrics.csv.
    Train(Common),
    /// PSNR/SSIM on the regenerated validation set.
    Eval(WithCheckpoint),
    /// Encoder vs IEM feature similarity and representative ability.
    InspectFeatures(WithCheckpoint),
    /// Finite-difference check of every op and a micro end-to-end model.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct Common {
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Overrides `[train] seed`.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Write into a non-empty output directory.
    #[arg(long)]
    force: bool,
    /// Overrides `[model] skip_mode`: full, none, single:K or msiam-iem.
    #[arg(long, value_name = "MODE", value_parser = parse_skip_mode)]
    skip_mode: Option<SkipMode>,
}

#[derive(Args, Debug)]
struct WithCheckpoint {
    #[command(flatten)]
    common: Common,
    /// Checkpoint directory written by `train`; without it a freshly
    /// initialised model (seeded by `--seed`) is used.
    #[arg(long, value_name = "DIR")]
    checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Optional directory for gradcheck.csv.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
    /// Only run cases whose name contains this substring.
    #[arg(long, value_name = "SUBSTR")]
    filter: Option<String>,
}

fn parse_skip_mode(s: &str) -> Result<SkipMode, String> {
    s.parse().map_err(|e: unetmm::Error| e.to_string())
}

/// A failed command: message plus process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub msg: String,
}

impl Failure {
    pub const USAGE: u8 = 2;
    pub const FORMAT: u8 = 3;
    pub const NUMERIC: u8 = 4;

    pub fn usage(msg: impl Into<String>) -> Self {
        Failure { code: Self::USAGE, msg: msg.into() }
    }
}

impl From<unetmm::Error> for Failure {
    fn from(e: unetmm::Error) -> Self {
        use unetmm::Error as E;
        let code = match &e {
            E::Format { .. } => Self::FORMAT,
            E::Numeric(_) => Self::NUMERIC,
            E::Io { .. } => 1,
            _ => Self::USAGE,
        };
        Failure { code, msg: e.to_string() }
    }
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides { seed: self.seed, skip_mode: self.skip_mode }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let v = cli.verbose;
    let result = match &cli.command {
        Command::AnalyzeMemory(c) => commands::analyze_memory(c),
        Command::Train(c) => commands::train(c, v),
        Command::Eval(c) => commands::eval(c),
        Command::InspectFeatures(c) => commands::inspect_features(c),
        Command::Gradcheck(g) => commands::gradcheck(g, v),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
