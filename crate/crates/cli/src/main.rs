//! `eend`: simulate, featurize, train, infer, combine, score, count.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

mod commands;
mod error;
mod manifest;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// End-to-end neural speaker diarization with encoder-decoder attractors.
#[derive(Debug, Parser)]
#[command(name = "eend", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a simulated multi-speaker corpus.
    Simulate(SimulateArgs),
    /// Compute spliced, subsampled log-Mel features from 8 kHz WAV files.
    Featurize(FeaturizeArgs),
    /// Train a model on a corpus manifest.
    Train(TrainArgs),
    /// Diarize recordings and write hypothesis RTTM.
    Infer(InferArgs),
    /// Fuse several hypothesis RTTM files by overlap-aware voting.
    Combine(CombineArgs),
    /// Score hypotheses against a reference (DER, optionally JER).
    Score(ScoreArgs),
    /// Tabulate estimated against reference speaker counts.
    Count(CountArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Speakers per mixture.
    #[arg(long, default_value_t = 2)]
    pub nspk: usize,
    /// Mean silence before each utterance, seconds.
    #[arg(long, default_value_t = 2.0)]
    pub beta: f64,
    /// Number of mixtures.
    #[arg(long, default_value_t = 10)]
    pub count: usize,
    #[arg(long, value_enum, default_value_t = SimModeArg::Feature)]
    pub mode: SimModeArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(short, long)]
    pub out: PathBuf,
    /// Truncate mixtures to this many seconds.
    #[arg(long)]
    pub max_duration: Option<f64>,
    /// Frame period of feature-mode mixtures, seconds.
    #[arg(long, default_value_t = 0.1)]
    pub frame_period: f64,
    /// Draw speakers from a fixed pool of this size.
    #[arg(long)]
    pub speaker_pool: Option<usize>,
    /// Seed of the speaker pool.
    #[arg(long, default_value_t = 0)]
    pub pool_seed: u64,
    /// Subsampling factor of waveform-mode features.
    #[arg(long, default_value_t = 10)]
    pub subsampling: usize,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SimModeArg {
    Feature,
    Waveform,
}

#[derive(Debug, Args)]
pub struct FeaturizeArgs {
    /// Input WAV files.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    /// Output directory; features are written as `<stem>.feat`.
    #[arg(short, long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub subsampling: usize,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Corpus manifest (`features labels recording-id` per line).
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory for `model.ckpt`, `loss.tsv`, `config.txt`.
    #[arg(short, long)]
    pub out: PathBuf,
    /// Flat `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Start from this checkpoint; its model settings are kept.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Override a setting, `key=value`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum InferMode {
    Plain,
    Iterative,
    IterativePlus,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    /// Model checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    /// Feature (`.feat`) or 8 kHz WAV (`.wav`) files; the recording id is
    /// the file stem.
    #[arg(long = "input", conflicts_with = "manifest")]
    pub inputs: Vec<PathBuf>,
    /// Corpus manifest to take recordings from instead of `--input`.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Speech activity: an RTTM file, a frame-label file, or `none`.
    #[arg(long, default_value = "none")]
    pub sad: String,
    #[arg(long, value_enum, default_value_t = InferMode::Plain)]
    pub mode: InferMode,
    /// Speakers per pass in the iterative modes.
    #[arg(long, default_value_t = 2)]
    pub smax: usize,
    /// Attractor existence threshold.
    #[arg(long, default_value_t = 0.5)]
    pub tau: f64,
    /// Use this many speakers instead of estimating the count (plain mode).
    #[arg(long)]
    pub num_speakers: Option<usize>,
    /// Seed of the attractor-input shuffle.
    #[arg(long, default_value_t = 0)]
    pub shuffle_seed: u64,
    /// Feed frames to the attractor encoder in chronological order.
    #[arg(long)]
    pub chronological: bool,
    /// Subsampling factor when featurizing WAV input.
    #[arg(long, default_value_t = 10)]
    pub subsampling: usize,
    /// Output directory; the hypothesis goes to `hyp.rttm`.
    #[arg(short, long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct CombineArgs {
    /// Hypothesis RTTM files.
    #[arg(required = true)]
    pub hyps: Vec<PathBuf>,
    /// Output RTTM; the run manifest goes next to it.
    #[arg(short, long)]
    pub out: PathBuf,
    /// Resolution of the frame grid used for voting, seconds.
    #[arg(long, default_value_t = 0.05)]
    pub frame_period: f64,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long = "ref")]
    pub reference: PathBuf,
    #[arg(long)]
    pub hyp: PathBuf,
    /// No-score collar around reference boundaries, seconds.
    #[arg(long, default_value_t = 0.25)]
    pub collar: f64,
    /// Also report the Jaccard error rate.
    #[arg(long)]
    pub jer: bool,
}

#[derive(Debug, Args)]
pub struct CountArgs {
    #[arg(long = "ref")]
    pub reference: PathBuf,
    #[arg(long)]
    pub hyp: PathBuf,
}

fn main() {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let result = match cli.command {
        Command::Simulate(a) => commands::simulate(a),
        Command::Featurize(a) => commands::featurize(a),
        Command::Train(a) => commands::train(a),
        Command::Infer(a) => commands::infer(a),
        Command::Combine(a) => commands::combine(a),
        Command::Score(a) => commands::score(a),
        Command::Count(a) => commands::count(a),
    };
    if let Err(e) = result {
        eprintln!("eend: {e}");
        std::process::exit(e.exit_code());
    }
}
