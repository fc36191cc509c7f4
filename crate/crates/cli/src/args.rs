use std::net::SocketAddr;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use nsd_core::datapipe::{RetentionRule, RoomType, SplitSelector};
use nsd_core::layout::{LayoutMode, SizeStrategy};
use nsd_core::training::ModelPreset;

#[derive(Debug, Parser)]
#[command(name = "nsd", version, about = "Neural scene decoration: furnish empty-room photographs from object layouts")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Crop and filter Structured3D renders into training pairs.
    Preprocess(PreprocessArgs),
    /// Train a generator and discriminator, writing checkpoints and a metrics log.
    Train(TrainArgs),
    /// Compute FID and KID between real and generated images.
    Evaluate(EvaluateArgs),
    /// Furnish one background according to a layout document.
    Generate(GenerateArgs),
    /// Run the HTTP generation service.
    Serve(ServeArgs),
}

fn parse_room(s: &str) -> Result<RoomType, String> {
    s.parse().map_err(|e: nsd_core::Error| e.to_string())
}

fn parse_preset(s: &str) -> Result<ModelPreset, String> {
    s.parse().map_err(|e: nsd_core::Error| e.to_string())
}

fn parse_split(s: &str) -> Result<SplitSelector, String> {
    match s {
        "train" => Ok(SplitSelector::Train),
        "test" => Ok(SplitSelector::Test),
        "all" => Ok(SplitSelector::All),
        other => Err(format!("unknown split {other:?}; expected train, test or all")),
    }
}

fn parse_retention(s: &str) -> Result<RetentionRule, String> {
    match s {
        "union" => Ok(RetentionRule::Union),
        "per_object" => Ok(RetentionRule::PerObject),
        other => Err(format!("unknown retention rule {other:?}; expected union or per_object")),
    }
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    /// Structured3D root containing scene_XXXXX directories.
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, value_parser = parse_room)]
    pub room_type: RoomType,
    /// Output directory for the crop manifest and crop images.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "all", value_parser = parse_split)]
    pub split: SplitSelector,
    #[arg(long, default_value = "union", value_parser = parse_retention)]
    pub retention_rule: RetentionRule,
    /// Accepted for uniformity; preprocessing draws no random numbers.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Flags shared by commands that build layouts.
#[derive(Debug, Args)]
pub struct LabelArgs {
    #[arg(long)]
    pub label_mode: Option<LayoutMode>,
    #[arg(long)]
    pub size_strategy: Option<SizeStrategy>,
    /// Size multiplier between object size and the square root of its mask area.
    #[arg(long = "m")]
    pub m: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML training config; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Crop manifest written by `preprocess`.
    #[arg(long, conflicts_with = "synthetic")]
    pub data: Option<PathBuf>,
    /// Train on this many procedurally generated pairs instead of a manifest.
    #[arg(long)]
    pub synthetic: Option<usize>,
    /// Network sizes: full, reduced64[:WIDTH] or tiny.
    #[arg(long, value_parser = parse_preset)]
    pub preset: Option<ModelPreset>,
    /// Total iterations; 0 writes the randomly initialised networks.
    #[arg(long)]
    pub iterations: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lambda_obj: Option<f64>,
    #[arg(long)]
    pub accumulation_steps: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    /// Continue from a training checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub labels: LabelArgs,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory for checkpoints and the metrics log.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Generator checkpoint; images are generated for every pair of `--data`.
    #[arg(long, requires = "data")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    pub split: SplitSelector,
    /// Directory of real images (PNG or JPEG).
    #[arg(long, conflicts_with_all = ["checkpoint", "real_features"])]
    pub real_images: Option<PathBuf>,
    #[arg(long, requires = "real_images")]
    pub fake_images: Option<PathBuf>,
    /// Precomputed real features ({"extractor_id", "features"}).
    #[arg(long, conflicts_with = "checkpoint")]
    pub real_features: Option<PathBuf>,
    #[arg(long, requires = "real_features")]
    pub fake_features: Option<PathBuf>,
    #[arg(long, default_value = "pooled-rgb-4x4")]
    pub extractor: String,
    #[arg(long)]
    pub subset_size: Option<usize>,
    #[arg(long, default_value_t = 100)]
    pub subsets: usize,
    #[command(flatten)]
    pub labels: LabelArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Report path; the report is also printed.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Empty-room photograph of any size.
    #[arg(long)]
    pub background: PathBuf,
    /// Layout document drawn on the background or on the model canvas.
    #[arg(long)]
    pub layout: PathBuf,
    #[arg(long)]
    pub size_strategy: Option<SizeStrategy>,
    /// Latent seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
    #[arg(long, default_value_t = 16)]
    pub queue: usize,
    #[arg(long, default_value_t = 16)]
    pub max_body_mb: usize,
}
