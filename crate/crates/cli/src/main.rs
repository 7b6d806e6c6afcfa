//! `sdem`: train, evaluate and inspect sdEM classifiers.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data error,
//! 4 numeric failure, 5 unsupported model file version.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sdem_core::Error;

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;
pub const EXIT_VERSION: u8 = 5;

#[derive(Parser, Debug)]
#[command(name = "sdem", version, about = "Discriminative training of generative classifiers with sdEM")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write model.json, metrics.csv and manifest.json.
    Train(TrainArgs),
    /// Re-run the training recorded in a manifest.
    Rerun(RerunArgs),
    /// Score a saved model on a labeled split.
    Eval(EvalArgs),
    /// Write a toy sample as `label x` lines.
    ToyGen(ToyGenArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModelArg {
    Gnb,
    Mnb,
    Lda,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum LossArg {
    Nll,
    Ncll,
    Hinge,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PriorArg {
    P1,
    P2,
    GnbDefault,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    LabelTokens,
    LabelCounts,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SpreadArg {
    Stddev,
    Variance,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub model: ModelArg,
    #[arg(long, value_enum)]
    pub loss: LossArg,
    /// Learning-rate decay; defaults to 1e-3 for the toy model and 1e-5 otherwise.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Defaults to 50 for the toy model and 10 otherwise.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// p1 or p2 for mnb, gnb-default for gnb; lda uses --eta instead.
    #[arg(long, value_enum)]
    pub prior: Option<PriorArg>,
    /// Topic-word prior (lda only, default 0.1).
    #[arg(long)]
    pub eta: Option<f64>,
    /// Number of topics (lda only, default 2).
    #[arg(long)]
    pub topics: Option<usize>,
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = FormatArg::LabelTokens)]
    pub format: FormatArg,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Generate the toy train and test draws from --seed (gnb only).
    #[arg(long)]
    pub toy: bool,
    /// Samples per toy draw.
    #[arg(long, default_value_t = 30_000)]
    pub toy_samples: usize,
    /// Reading of the second argument of N(m, s) in the toy distribution (gnb only).
    #[arg(long, value_enum)]
    pub spread: Option<SpreadArg>,
    /// Record measured wall time in metrics.csv instead of 0.
    #[arg(long)]
    pub record_time: bool,
}

#[derive(Args, Debug)]
pub struct RerunArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long, value_enum)]
    pub model: ModelArg,
    /// Path to a model.json written by `train`.
    #[arg(long)]
    pub model_file: PathBuf,
    /// Labeled split to score; toy `label x` lines for gnb.
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = FormatArg::LabelTokens)]
    pub format: FormatArg,
    /// Score the fresh toy test draw derived from the model's seed (gnb only).
    #[arg(long)]
    pub toy: bool,
    #[arg(long, default_value_t = 30_000)]
    pub toy_samples: usize,
}

#[derive(Args, Debug)]
pub struct ToyGenArgs {
    #[arg(long, default_value_t = 30_000)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write the test draw of `train --toy` instead of the training draw.
    #[arg(long)]
    pub test_draw: bool,
    #[arg(long, value_enum, default_value_t = SpreadArg::Stddev)]
    pub spread: SpreadArg,
    /// Output file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Error type of the binary: a message plus the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) | Error::Refused(_) => EXIT_USAGE,
            Error::Numeric { .. } | Error::Feasibility { .. } => EXIT_NUMERIC,
            Error::Version { .. } => EXIT_VERSION,
            Error::Vocabulary(_) | Error::Parse { .. } | Error::Format(_) | Error::Io(_) | Error::Json(_) => {
                EXIT_DATA
            }
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e).into()
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SDEM_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => commands::train(&args),
        Command::Rerun(args) => commands::rerun(&args),
        Command::Eval(args) => commands::eval(&args),
        Command::ToyGen(args) => commands::toy_gen(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
