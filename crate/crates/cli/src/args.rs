use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

/// Bounding-box refinement pipeline: synthetic data, mask extraction, error
/// statistics, training, evaluation, track interpolation and the annotation
/// service.
#[derive(Debug, Parser)]
#[command(name = "tightbox", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render synthetic single-object images with exact boxes (or a moving-shape sequence)
    Synth(SynthArgs),
    /// Convert instance-id mask PNGs into ground-truth labels
    Extract(ExtractArgs),
    /// Fit per-edge error statistics from matched ground truth and pre-labels
    Stats(StatsArgs),
    /// Train a refinement model from scratch
    Train(TrainArgs),
    /// Continue training from a checkpoint
    Finetune(FinetuneArgs),
    /// Report MAE/LE and tolerance tables before and after refinement
    Eval(EvalArgs),
    /// Refine every rough box in a label file
    Refine(RefineArgs),
    /// Interpolate a keyframe track and optionally refine the in-between boxes
    TrackInterp(TrackArgs),
    /// Run the HTTP refinement and label service
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Number of images to render
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    /// Random seed
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory (images/, labels.jsonl, manifest.json)
    #[arg(long)]
    pub out: PathBuf,
    /// Image width in pixels
    #[arg(long, default_value_t = 256)]
    pub width: u32,
    /// Image height in pixels
    #[arg(long, default_value_t = 256)]
    pub height: u32,
    /// Background: flat, noise or texture
    #[arg(long, default_value = "noise")]
    pub background: String,
    /// Render a sequence of this many frames instead (writes truth.jsonl and track.json)
    #[arg(long)]
    pub frames: Option<usize>,
    /// Keyframe spacing of the sequence's track.json
    #[arg(long, default_value_t = 5)]
    pub key_interval: usize,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    /// Directory of 8- or 16-bit instance-id mask PNGs
    #[arg(long)]
    pub masks: PathBuf,
    /// Directory of the matching images (same relative path, or Cityscapes naming)
    #[arg(long)]
    pub images: PathBuf,
    /// Output directory (labels.jsonl, manifest.json)
    #[arg(long)]
    pub out: PathBuf,
    /// Components smaller than this many pixels are dropped
    #[arg(long, default_value_t = 50)]
    pub min_pixels: usize,
    /// Keep only instances of this class name (e.g. person)
    #[arg(long)]
    pub class: Option<String>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    /// Ground-truth label file
    #[arg(long)]
    pub gt: PathBuf,
    /// Pre-label file (e.g. detector output)
    #[arg(long)]
    pub pre: PathBuf,
    /// Output directory (error_model.json, matched.jsonl, manifest.json)
    #[arg(long)]
    pub out: PathBuf,
    /// Minimum IoU for a pre-label to match a ground-truth box
    #[arg(long, default_value_t = 0.5)]
    pub iou: f64,
}

/// Training settings; each flag overrides the config file, which overrides
/// the built-in default.
#[derive(Debug, Args, Default, Clone)]
pub struct TrainOverrides {
    /// JSON file with TrainConfig fields
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Number of epochs [default: 10]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Batch size [default: 32]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Learning rate [default: 0.0001]
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Optimizer: adaptive-moment or plain-gradient [default: adaptive-moment]
    #[arg(long)]
    pub optimizer: Option<String>,
    /// Random seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Fraction of the training instances to use, in (0, 1] [default: 1]
    #[arg(long)]
    pub fraction: Option<f64>,
    /// Train-time multiplier on the error model's sigmas [default: 1]
    #[arg(long)]
    pub error_scale: Option<f64>,
    /// Fraction held out for the validation curve [default: 0.1]
    #[arg(long)]
    pub validation_fraction: Option<f64>,
    /// Backbone: tiny, vgg16-style, resnet50-style or mobilenet-style [default: tiny]
    #[arg(long)]
    pub backbone: Option<String>,
    /// Network input size in pixels [default: 256]
    #[arg(long)]
    pub patch_size: Option<usize>,
    /// Crop expansion ratio per edge [default: 0.15]
    #[arg(long)]
    pub expand_ratio: Option<f64>,
    /// Error statistics JSON (as written by `stats`) [default: sigma 0.08 / 0.14]
    #[arg(long)]
    pub error_model: Option<PathBuf>,
    /// Huber loss delta [default: 1]
    #[arg(long)]
    pub huber_delta: Option<f64>,
    /// Randomly mirror training samples [default: false]
    #[arg(long)]
    pub horizontal_flip: Option<bool>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Label file with true boxes
    #[arg(long)]
    pub labels: PathBuf,
    /// Image root the label image ids are relative to
    #[arg(long)]
    pub images: PathBuf,
    /// Output directory (checkpoint.json, checkpoint.bin, history.json, manifest.json)
    #[arg(long)]
    pub out: PathBuf,
    /// Also train on instances marked not visible
    #[arg(long)]
    pub include_hidden: bool,
    #[command(flatten)]
    pub settings: TrainOverrides,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    /// Checkpoint directory or its checkpoint.json
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint directory or its checkpoint.json
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Label file with true boxes (and pre-labels for the prelabel scenario)
    #[arg(long)]
    pub labels: PathBuf,
    /// Image root
    #[arg(long)]
    pub images: PathBuf,
    /// Output directory (report.json, report.txt, manifest.json)
    #[arg(long)]
    pub out: PathBuf,
    /// JSON file with EvalConfig fields
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Scenario: prelabel or perturbed_gt [default: perturbed_gt]
    #[arg(long)]
    pub scenario: Option<String>,
    /// Seed of the perturbed_gt rough boxes [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated tolerances in percent [default: 1,2,3,4,5]
    #[arg(long, value_delimiter = ',')]
    pub tolerances: Option<Vec<f64>>,
    /// Error statistics JSON for perturbed_gt [default: sigma 0.08 / 0.14]
    #[arg(long)]
    pub error_model: Option<PathBuf>,
    /// Normalization: per_box or pooled [default: per_box]
    #[arg(long)]
    pub normalization: Option<String>,
    /// Also evaluate instances marked not visible
    #[arg(long)]
    pub include_hidden: bool,
}

#[derive(Debug, Args)]
pub struct RefineArgs {
    /// Checkpoint directory or its checkpoint.json
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Label file; each instance's pre-label (else its box) is refined
    #[arg(long)]
    pub labels: PathBuf,
    /// Image root
    #[arg(long)]
    pub images: PathBuf,
    /// Output directory (labels.jsonl, manifest.json)
    #[arg(long)]
    pub out: PathBuf,
    /// True boxes for a truth-echo checkpoint
    #[arg(long)]
    pub truth: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrackArgs {
    /// Track file with keyframes
    #[arg(long)]
    pub track: PathBuf,
    /// Frame images; frame k is the k-th image in sorted path order
    #[arg(long)]
    pub images: PathBuf,
    /// Refine interpolated boxes with this checkpoint
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Output directory (track_labels.jsonl, manifest.json)
    #[arg(long)]
    pub out: PathBuf,
    /// True boxes for a truth-echo checkpoint
    #[arg(long)]
    pub truth: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Checkpoint directory or its checkpoint.json
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset root with the images to annotate
    #[arg(long)]
    pub data: PathBuf,
    /// Listening port
    #[arg(long, default_value_t = tightbox_service::DEFAULT_PORT)]
    pub port: u16,
    /// Listening address
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Label store file [default: <data>/labels.jsonl]
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Maximum queued refine requests before answering 429
    #[arg(long, default_value_t = tightbox_service::DEFAULT_QUEUE_DEPTH)]
    pub queue_depth: usize,
    /// True boxes for a truth-echo checkpoint
    #[arg(long)]
    pub truth: Option<PathBuf>,
}
