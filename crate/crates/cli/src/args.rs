use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "star",
    version,
    about = "Toy-scale self-guided training for autoregressive image-token models",
    after_help = "Exit codes: 0 success, 2 usage, 3 numeric failure, 4 artifact mismatch.\n\
                  Any command accepts --help-json for a machine-readable flag reference."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize the class-conditional image set, fit the codebook and write the token dataset.
    MakeData(MakeDataArgs),
    /// Train a baseline or ST-AR model into a run directory.
    Train(TrainArgs),
    /// Sample token grids from a checkpoint with classifier-free guidance.
    Sample(SampleArgs),
    /// Per-step linear probe of frozen features.
    Probe(ProbeArgs),
    /// Attention locality profile and mean attention maps.
    Attn(AttnArgs),
    /// Token and feature agreement between augmented views.
    Invariance(InvarianceArgs),
    /// Finite-difference check of every loss gradient on the micro configuration.
    Gradcheck(GradcheckArgs),
    /// Train and evaluate one run per value of an ablation axis.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct MakeDataArgs {
    /// Number of scene classes.
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    /// Images per class.
    #[arg(long, default_value_t = 100)]
    pub per_class: usize,
    /// Image side in pixels.
    #[arg(long, default_value_t = 32)]
    pub image_side: usize,
    /// Patch side in pixels; one token per patch.
    #[arg(long, default_value_t = 4)]
    pub patch: usize,
    /// Codebook size.
    #[arg(long, default_value_t = 64)]
    pub vocab: usize,
    /// Seed of the scenes and the codebook.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory; must not already hold a dataset.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Toy schedule sized for a few thousand steps at batch 8.
    StarNano,
    /// The full-scale hyperparameters, unchanged.
    Full,
}

/// Configuration layering shared by `train` and `sweep`. Later sources
/// win: preset, config file, mode flag, `--set`, then the named flags.
#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// Starting hyperparameters.
    #[arg(long, value_enum, default_value_t = Preset::StarNano)]
    pub preset: Preset,
    /// Config file of `section.key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// All four losses with attention masking (the default for fresh runs).
    #[arg(long, conflicts_with = "baseline")]
    pub star: bool,
    /// Next-token loss only: alpha = beta = 0, mask ratio 0.
    #[arg(long)]
    pub baseline: bool,
    /// Override one config key, e.g. `--set loss.tau=0.1`
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    /// Total optimizer steps.
    #[arg(long)]
    pub steps: Option<u64>,
    /// Training seed (initialization, batches, dropout, augmentation, masks).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Dataset directory written by make-data; omitted means synthesize in memory.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Run directory. Defaults to the checkpoint's run directory when resuming.
    #[arg(long, required_unless_present = "resume")]
    pub out: Option<PathBuf>,
    /// Continue from this checkpoint; every non-schedule setting must match it.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Print a progress line every N steps (0 is silent).
    #[arg(long, default_value_t = 100)]
    pub log_every: u64,
}

/// Which checkpoint to read and where to write.
#[derive(Debug, Clone, Args)]
pub struct CheckpointArgs {
    /// Checkpoint file, or a run directory holding checkpoint.ckpt.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory; must agree with the checkpoint's configuration.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory [default: <run dir>/<command>].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[command(flatten)]
    pub io: CheckpointArgs,
    /// Class to condition on.
    #[arg(long, default_value_t = 0)]
    pub class: usize,
    /// Number of samples.
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    /// Guidance scale; 1 disables the unconditional pass.
    #[arg(long, default_value_t = 2.0)]
    pub cfg_scale: f64,
    /// Softmax temperature.
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    /// Keep only the k most likely tokens (1 is greedy).
    #[arg(long)]
    pub top_k: Option<usize>,
    /// Sample i draws from a stream derived from this seed and i.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also decode every sample to a PNG through the codebook.
    #[arg(long)]
    pub png: bool,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[command(flatten)]
    pub io: CheckpointArgs,
    /// Sequences to probe, spread over the dataset (0 uses all).
    #[arg(long, default_value_t = 0)]
    pub count: usize,
    /// 1-based layer to probe [default: the model's tap depth].
    #[arg(long)]
    pub layer: Option<usize>,
    /// Full-batch gradient steps of the probe.
    #[arg(long, default_value_t = 90)]
    pub epochs: usize,
    /// Seed of the train/test split.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Permute the labels before fitting; the result is a chance-level reference.
    #[arg(long)]
    pub shuffle_labels: bool,
}

#[derive(Debug, Args)]
pub struct AttnArgs {
    #[command(flatten)]
    pub io: CheckpointArgs,
    /// Sequences traced, spread over the dataset.
    #[arg(long, default_value_t = 256)]
    pub traces: usize,
}

#[derive(Debug, Args)]
pub struct InvarianceArgs {
    #[command(flatten)]
    pub io: CheckpointArgs,
    /// Augmented view pairs, spread over the dataset.
    #[arg(long, default_value_t = 500)]
    pub pairs: usize,
    /// 1-based layer compared [default: the model's tap depth].
    #[arg(long)]
    pub layer: Option<usize>,
    /// Seed of the view augmentations.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Seed of the evaluation point and the micro batch.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-4)]
    pub epsilon: f64,
    /// Also write gradcheck.json here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    /// Attention mask ratio r.
    #[value(name = "mask_ratio", alias = "mask-ratio")]
    MaskRatio,
    /// Contrastive tap depth, given as fractions of the layer count.
    #[value(name = "tap_depth", alias = "tap-depth")]
    TapDepth,
    /// Positions sampled per sequence for the contrastive losses.
    #[value(name = "k_steps", alias = "k-steps")]
    KSteps,
    /// On/off grid of the MIM, inter-step and inter-view losses.
    Losses,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Ablation axis.
    #[arg(long, value_enum)]
    pub axis: Axis,
    /// Comma-separated values [default: the axis's standard grid].
    #[arg(long, value_delimiter = ',')]
    pub values: Vec<String>,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Sweep directory; member runs go in subdirectories and are never overwritten.
    #[arg(long)]
    pub out: PathBuf,
    /// Member runs trained at once.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Sequences traced per member for the locality summary.
    #[arg(long, default_value_t = 64)]
    pub traces: usize,
    /// Sequences probed per member (0 uses all).
    #[arg(long, default_value_t = 200)]
    pub probe_count: usize,
    /// Augmented pairs per member for the invariance summary.
    #[arg(long, default_value_t = 100)]
    pub pairs: usize,
}
