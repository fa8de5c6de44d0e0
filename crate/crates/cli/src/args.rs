use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use mlh_core::{Branch, DistanceMode};
use serde::{Deserialize, Serialize};

#[derive(Debug, Parser)]
#[command(
    name = "mlh",
    version,
    about = "Train and evaluate dual-branch hash codes"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Pick a minimum distance and generate hash centers.
    GenCenters(GenCentersArgs),
    /// Write a synthetic clustered feature file, optionally split.
    Synth(SynthArgs),
    /// Train a model on every row of a feature file.
    Train(TrainArgs),
    /// Binarize features with one branch of a checkpoint.
    Encode(EncodeArgs),
    /// Rank a database for each query and report mAP@k.
    Eval(EvalArgs),
    /// Train and evaluate every cell of a config grid.
    Ablate(AblateArgs),
    /// Re-run the command recorded in a manifest.
    Replay(ReplayArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenCenters(_) => "gen-centers",
            Command::Synth(_) => "synth",
            Command::Train(_) => "train",
            Command::Encode(_) => "encode",
            Command::Eval(_) => "eval",
            Command::Ablate(_) => "ablate",
            Command::Replay(_) => "replay",
        }
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct GenCentersArgs {
    #[arg(long)]
    pub bits: usize,
    #[arg(long)]
    pub classes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// paper (2^c condition) or gv (c·V < 2^q)
    #[arg(long, default_value = "paper")]
    pub mode: DistanceMode,
    #[arg(long, default_value_t = 16)]
    pub max_attempts: usize,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SynthArgs {
    #[arg(long)]
    pub classes: usize,
    #[arg(long)]
    pub per_class: usize,
    #[arg(long)]
    pub dim: usize,
    #[arg(long)]
    pub spread: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Fraction of rows given a second label.
    #[arg(long, default_value_t = 0.0)]
    pub multi_label: f64,
    /// With --n-query or --n-train, writes OUT.query/.train/.db files instead of OUT.
    #[arg(long)]
    pub n_query: Option<usize>,
    #[arg(long)]
    pub n_train: Option<usize>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub centers: PathBuf,
    /// Flat `key = value` lines; unset keys keep their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch loss breakdown as JSON lines.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Overrides `seed` from the config.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct EncodeArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value = "center")]
    pub branch: Branch,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct EvalArgs {
    /// Query codes.
    #[arg(long)]
    pub query: PathBuf,
    /// Database codes.
    #[arg(long)]
    pub db: PathBuf,
    /// Feature file supplying query labels.
    #[arg(long)]
    pub query_data: PathBuf,
    /// Feature file supplying database labels.
    #[arg(long)]
    pub db_data: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub k: usize,
    /// JSON with map, k and per_query_ap.
    #[arg(long)]
    pub out: PathBuf,
    /// Mean PR curve over the full ranking, as CSV.
    #[arg(long)]
    pub pr: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct AblateArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub query: PathBuf,
    #[arg(long)]
    pub db: PathBuf,
    #[arg(long)]
    pub centers: PathBuf,
    /// Lines of `key = v1, v2, ...`; cells are the cartesian product.
    #[arg(long)]
    pub grid: PathBuf,
    /// Base config applied before each cell.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Repeats per cell, with seeds seed, seed+1, ...
    #[arg(long, default_value_t = 1)]
    pub repeats: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub k: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
}
