//! `viscosurr`: generate data, train and evaluate surrogates, benchmark, serve.

mod commands;
mod config;
mod manifest;

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use viscosurr_core::CoreError;

#[derive(Debug, Parser)]
#[command(name = "viscosurr", version, about = "Viscoelastic soft-tissue surrogate pipeline", propagate_version = true)]
pub struct Cli {
    /// TOML file whose [gendata]/[train]/[eval]/[bench]/[serve] tables supply
    /// flag values by long name; flags given on the command line win.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Cap on worker threads for every parallel section (default: all cores).
    #[arg(long, global = true, env = "VISCOSURR_THREADS", value_name = "N",
          value_parser = clap::value_parser!(u64).range(1..))]
    pub threads: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate force/displacement sequences with the FEM reference.
    Gendata(GendataArgs),
    /// Train a surrogate on a generated dataset.
    Train(TrainArgs),
    /// Compare checkpoints against the reference on held-out sequences.
    Eval(EvalArgs),
    /// Measure per-frame inference latency.
    Bench(BenchArgs),
    /// Start the HTTP/WebSocket simulation service.
    Serve(ServeArgs),
}

impl Command {
    pub const NAMES: [&'static str; 5] = ["gendata", "train", "eval", "bench", "serve"];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum FixedFaces {
    /// Bottom and side faces fixed, top free.
    Paper,
    /// Bottom face fixed.
    Bottom,
    /// Nothing fixed.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaterialPreset {
    /// Relaxation times 330 s and 11 s.
    Paper,
    /// Relaxation times scaled by 1/100 (3.3 s and 0.11 s).
    Desk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelChoice {
    Linear,
    /// CNN U-Net (single frame).
    Cnn,
    CnnLstm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rounding {
    Floor,
    Ceil,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SequenceSet {
    Train,
    Val,
    Test,
    All,
}

#[derive(Debug, Clone, Args, Serialize)]
#[command(args_override_self = true)]
pub struct GendataArgs {
    /// Grid nodes per axis, X,Y,Z.
    #[arg(long, value_name = "X,Y,Z", default_value = "9,9,5", value_parser = config::parse_dims)]
    pub mesh: [usize; 3],
    /// Node spacing in mm: one value, or X,Y,Z.
    #[arg(long, value_name = "MM", default_value = "1.0", value_parser = config::parse_spacing)]
    pub spacing: [f64; 3],
    /// Which faces carry zero-displacement constraints.
    #[arg(long, value_enum, default_value = "paper")]
    pub fixed: FixedFaces,
    /// Material constants preset.
    #[arg(long, value_enum, default_value = "desk")]
    pub material: MaterialPreset,
    /// JSON material parameters {c1, mu, nu, rho, prony:[{g, tau}]} (MPa, t/mm³, s); overrides --material.
    #[arg(long, value_name = "FILE")]
    pub material_file: Option<PathBuf>,
    /// Number of sequences.
    #[arg(long, default_value_t = 60)]
    pub sequences: usize,
    /// Recorded frames per sequence.
    #[arg(long, default_value_t = 20)]
    pub frames: usize,
    /// Time between recorded frames in s.
    #[arg(long, value_name = "S", default_value_t = 0.1)]
    pub sample_interval: f64,
    /// Upper bound of one contact patch's total force in N.
    #[arg(long, value_name = "N", default_value_t = 2e-4)]
    pub max_force: f64,
    /// Probability that a sequence starts with a broad press.
    #[arg(long, default_value_t = 0.35)]
    pub press_probability: f64,
    /// Upper bound of a press's total force in N.
    #[arg(long, value_name = "N", default_value_t = 6e-3)]
    pub press_max_force: f64,
    /// Random seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output dataset container.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
#[command(args_override_self = true)]
pub struct TrainArgs {
    /// Dataset container from `gendata`.
    #[arg(long, value_name = "FILE")]
    pub data: PathBuf,
    /// Surrogate architecture.
    #[arg(long, value_enum, default_value = "cnn-lstm")]
    pub model: ModelChoice,
    /// LSTM hidden size N_N (cnn-lstm).
    #[arg(long, default_value_t = 512)]
    pub nn: usize,
    /// Input window length N_t in frames (cnn-lstm).
    #[arg(long, default_value_t = 2)]
    pub nt: usize,
    /// Base convolution filters [default: 64 for cnn, 32 for cnn-lstm].
    #[arg(long)]
    pub filters: Option<usize>,
    /// Pooled-extent rounding (cnn-lstm).
    #[arg(long, value_enum, default_value = "ceil")]
    pub pool_rounding: Rounding,
    /// Weight λ of the volume penalty; 0 gives the generic MSE model.
    #[arg(long, default_value_t = 0.1)]
    pub lambda: f64,
    /// Volume-penalty gate as a fraction of the rest volume.
    #[arg(long, default_value_t = 0.07)]
    pub gate: f64,
    /// Absolute volume-penalty gate in mm³ (overrides --gate).
    #[arg(long, value_name = "MM3")]
    pub gate_abs: Option<f64>,
    /// Weight of the force/displacement cosine-alignment term.
    #[arg(long, default_value_t = 0.0)]
    pub cosine_weight: f64,
    /// Adam learning rate.
    #[arg(long, default_value_t = 1e-5)]
    pub lr: f64,
    /// Maximum epochs.
    #[arg(long, default_value_t = 300)]
    pub epochs: usize,
    /// Mini-batch size in windows.
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    /// Epochs without validation improvement before stopping.
    #[arg(long, default_value_t = 30)]
    pub patience: usize,
    /// Train/val/test fractions of the sequences.
    #[arg(long, value_name = "TRAIN,VAL,TEST", default_value = "0.7,0.15,0.15", value_parser = config::parse_split)]
    pub split: [f64; 3],
    /// Seed of the sequence split [default: --seed].
    #[arg(long)]
    pub split_seed: Option<u64>,
    /// Seed for initialization and shuffling.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Continue from `<out>.last.vsdt` instead of starting fresh.
    #[arg(long)]
    pub resume: bool,
    /// Output checkpoint (best validation loss); the last epoch goes to `<out>.last.vsdt`.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
#[command(args_override_self = true)]
pub struct EvalArgs {
    /// Dataset container from `gendata`.
    #[arg(long, value_name = "FILE")]
    pub data: PathBuf,
    /// One or more checkpoints; the first is the improvement baseline.
    #[arg(long, value_name = "FILE", num_args = 1.., required = true)]
    pub checkpoints: Vec<PathBuf>,
    /// Which sequences to evaluate.
    #[arg(long, value_enum, default_value = "test")]
    pub sequences: SequenceSet,
    /// Train/val/test fractions (must match training).
    #[arg(long, value_name = "TRAIN,VAL,TEST", default_value = "0.7,0.15,0.15", value_parser = config::parse_split)]
    pub split: [f64; 3],
    /// Seed of the sequence split (must match training).
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
    /// Bland-Altman limit multiplier (1.96 for 95%).
    #[arg(long, default_value_t = 1.96)]
    pub z: f64,
    /// Sequences flagged as farthest from the training force level.
    #[arg(long, default_value_t = 3)]
    pub flag_count: usize,
    /// Output directory for CSV reports and metrics.json.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
#[command(args_override_self = true)]
pub struct BenchArgs {
    /// Checkpoint to time.
    #[arg(long, value_name = "FILE", required_unless_present = "model", conflicts_with = "model")]
    pub checkpoint: Option<PathBuf>,
    /// Time a freshly initialized model of this kind instead of a checkpoint.
    #[arg(long, value_enum)]
    pub model: Option<ModelChoice>,
    /// Grid nodes per axis for --model.
    #[arg(long, value_name = "X,Y,Z", default_value = "17,17,8", value_parser = config::parse_dims)]
    pub mesh: [usize; 3],
    /// LSTM hidden size for --model cnn-lstm.
    #[arg(long, default_value_t = 512)]
    pub nn: usize,
    /// Window length for --model cnn-lstm.
    #[arg(long, default_value_t = 2)]
    pub nt: usize,
    /// Base filters for --model [default: 64 for cnn, 32 for cnn-lstm].
    #[arg(long)]
    pub filters: Option<usize>,
    /// Timed forward passes (at least 100).
    #[arg(long, default_value_t = 100)]
    pub iterations: usize,
    /// Untimed warm-up passes (at least 10).
    #[arg(long, default_value_t = 10)]
    pub warmup: usize,
    /// Seed of the synthetic input frames.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the latency report as JSON.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
#[command(args_override_self = true)]
pub struct ServeArgs {
    /// Default checkpoint for surrogate sessions.
    #[arg(long, value_name = "FILE")]
    pub checkpoint: Option<PathBuf>,
    /// Address to bind.
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// TCP port (0 picks a free one).
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    /// Make FEM the default engine for new sessions.
    #[arg(long)]
    pub fem: bool,
    /// Material of FEM sessions.
    #[arg(long, value_enum, default_value = "paper")]
    pub material: MaterialPreset,
    /// Grid of FEM sessions [default: the checkpoint's, else 17,17,8].
    #[arg(long, value_name = "X,Y,Z", value_parser = config::parse_dims)]
    pub mesh: Option<[usize; 3]>,
}

/// Failure classes, one exit code each.
#[derive(Debug)]
pub enum Failure {
    /// Bad flags, config, inputs or incompatible files (exit 2).
    Config(String),
    /// The FEM solver could not produce a sequence (exit 3).
    Solver(String),
    /// Training aborted on a non-finite loss or gradient (exit 4).
    Training(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Solver(_) => 3,
            Failure::Training(_) => 4,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(m) | Failure::Solver(m) | Failure::Training(m) => f.write_str(m),
        }
    }
}

impl From<CoreError> for Failure {
    fn from(e: CoreError) -> Self {
        let msg = e.to_string();
        match e {
            CoreError::ElementInversion { .. } | CoreError::NonFinite { .. } | CoreError::ScenarioRejected { .. } => {
                Failure::Solver(msg)
            }
            CoreError::Training { .. } => Failure::Training(msg),
            _ => Failure::Config(msg),
        }
    }
}

fn main() -> ExitCode {
    let argv: Vec<OsString> = std::env::args_os().collect();
    let cli = match config::parse_with_config(argv) {
        Ok(cli) => cli,
        Err(config::ParseFailure::Clap(e)) => e.exit(),
        Err(config::ParseFailure::Config(msg)) => {
            eprintln!("error: {msg}");
            return ExitCode::from(2);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}
