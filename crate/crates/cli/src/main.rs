//! `dissect`: synthetic data, training, unit dissection, survey service and
//! lexicon reports.
//!
//! Exit status is 0 on success, 1 when flags or inputs fail validation
//! before work starts, and 2 when a run fails part-way.

mod commands;
mod config;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "dissect", version, about = "Train a patch classifier and dissect its units")]
struct Cli {
    /// TOML file with one table of flag values per subcommand; flags given
    /// on the command line take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a seeded synthetic corpus of cases and its index file.
    #[command(args_override_self = true)]
    GenData(GenDataArgs),
    /// Train DissectNet-T on the train split of an index.
    #[command(args_override_self = true)]
    Train(TrainArgs),
    /// Probe a convolutional layer and write the unit catalog and montages.
    #[command(args_override_self = true)]
    Dissect(DissectArgs),
    /// Run the survey HTTP service over a catalog directory.
    #[command(args_override_self = true)]
    Serve(ServeArgs),
    /// Compute the lexicon overlap report from an annotation log.
    #[command(args_override_self = true)]
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub cases: usize,
    /// Fraction of cases that contain lesions.
    #[arg(long, default_value_t = 0.5)]
    pub positive_frac: f64,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Case index written by gen-data (or any compatible index).
    #[arg(long)]
    pub index: PathBuf,
    /// Output model path; `.netm` and `.netw` are written next to it.
    #[arg(long)]
    pub out_model: PathBuf,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub learning_rate: f32,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f32,
    #[arg(long, default_value_t = 1e-4)]
    pub weight_decay: f32,
    #[arg(long, default_value_t = 0.25)]
    pub window_frac: f64,
    #[arg(long, default_value_t = 0.5)]
    pub stride_frac: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitChoice {
    Train,
    Val,
    Test,
    /// Validation and test together.
    Heldout,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ThresholdChoice {
    MaxScores,
    AllActivations,
}

#[derive(Debug, Args)]
pub struct DissectArgs {
    /// Model manifest (`.netm`) written by train.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long, default_value = "conv3")]
    pub layer: String,
    #[arg(long, default_value_t = 12)]
    pub k: usize,
    #[arg(long, default_value_t = 0.005)]
    pub quantile: f64,
    /// Catalog output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Which cases to probe; splits come from the split file saved by train.
    #[arg(long, value_enum, default_value_t = SplitChoice::Test)]
    pub split: SplitChoice,
    /// Units to put in front of readers; defaults to min(45, unit count).
    #[arg(long)]
    pub survey_n: Option<usize>,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = ThresholdChoice::MaxScores)]
    pub threshold_source: ThresholdChoice,
    #[arg(long, default_value_t = 0.25)]
    pub window_frac: f64,
    #[arg(long, default_value_t = 0.5)]
    pub stride_frac: f64,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Catalog directory written by dissect.
    #[arg(long)]
    pub catalog: PathBuf,
    /// Annotation log; defaults to `annotations.jsonl` in the catalog directory.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Lexicon file; the bundled default is used when omitted.
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    /// 0 picks a free port.
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub log: PathBuf,
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    /// Also write the report as JSON to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn run(args: Vec<OsString>) -> Result<(), CliError> {
    let args = config::expand_args(args)?;
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => Ok(()),
                _ => Err(CliError::Validation("invalid arguments".into())),
            };
        }
    };
    match cli.command {
        Command::GenData(a) => commands::gen_data(&a),
        Command::Train(a) => commands::train(&a),
        Command::Dissect(a) => commands::dissect(&a),
        Command::Serve(a) => commands::serve(&a),
        Command::Report(a) => commands::report(&a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(std::env::args_os().collect()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if !matches!(&e, CliError::Validation(m) if m == "invalid arguments") {
                eprintln!("error: {e}");
            }
            ExitCode::from(e.exit_code())
        }
    }
}
