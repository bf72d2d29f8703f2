//! `dcvit`: synthetic data, label clustering, training, evaluation and
//! diagnostics for the EEG gaze transformer.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data or I/O
//! error, 4 numeric failure (non-finite values during training or
//! inference).

mod commands;
mod config;
mod manifest;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "dcvit", version, about = "EEG gaze estimation with a depthwise-separable vision transformer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic Large-Grid dataset.
    Synth(SynthArgs),
    /// Replace every gaze label with its k-means centre.
    Cluster(ClusterArgs),
    /// Train (optionally several trials) and keep the best-validation weights.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Write diagnostic plots and tables for a checkpoint.
    Analyze(AnalyzeArgs),
    /// Print the header of a dataset or checkpoint file.
    Inspect(InspectArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OnOff {
    On,
    Off,
}

impl OnOff {
    pub fn enabled(self) -> bool {
        self == OnOff::On
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// The full-size network (86M parameters).
    Full,
    /// A small network for quick experiments.
    Tiny,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Head {
    Regression,
    Classification,
}

#[derive(Debug, Args)]
pub struct ConfigArg {
    /// JSON file with `synth`, `model`, `train` and `cluster` sections (or a
    /// run manifest); explicit flags take precedence.
    #[arg(long, value_name = "JSON")]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub config: ConfigArg,
}

#[derive(Debug, Args)]
pub struct ClusterArgs {
    #[arg(long = "in", value_name = "PATH")]
    pub input: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Seed the fit with the synthetic grid and snap centres onto it.
    #[arg(long, value_name = "on|off")]
    pub snap_grid: Option<OnOff>,
    #[command(flatten)]
    pub config: ConfigArg,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long = "in", value_name = "PATH")]
    pub input: PathBuf,
    /// Output prefix; `.dcvt`, `.metrics.csv`, `.summary.json` and
    /// `.manifest.json` files are derived from it.
    #[arg(long, value_name = "PREFIX")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, value_name = "on|off")]
    pub ds_block: Option<OnOff>,
    /// Train on k-means centres fitted to the training labels.
    #[arg(long, value_name = "on|off")]
    pub clustered: Option<OnOff>,
    #[arg(long, value_name = "on|off")]
    pub snap_grid: Option<OnOff>,
    #[arg(long)]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub head: Option<Head>,
    #[command(flatten)]
    pub config: ConfigArg,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long = "in", value_name = "PATH")]
    pub input: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub model: PathBuf,
    #[arg(long, value_name = "PREFIX")]
    pub out: PathBuf,
    #[command(flatten)]
    pub config: ConfigArg,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long = "in", value_name = "PATH")]
    pub input: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub model: PathBuf,
    #[arg(long, value_name = "PREFIX")]
    pub out: PathBuf,
    /// Error threshold separating blue from red points, in mm.
    #[arg(long, default_value_t = 55.4)]
    pub threshold_mm: f64,
    /// Minimum softmax probability for the high-confidence heatmaps.
    #[arg(long, default_value_t = 0.9)]
    pub confidence: f64,
    #[arg(long)]
    pub k: Option<usize>,
    #[command(flatten)]
    pub config: ConfigArg,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long = "in", value_name = "PATH")]
    pub input: PathBuf,
}

pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let printable: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match commands::dispatch(cli.command, &printable) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn main() {
    std::process::exit(run(std::env::args_os()));
}
