use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use modalfuse::model::{Scale, Variant};
use modalfuse::synth::{MarkerRegion, Task};
use modalfuse::training::Precision;

#[derive(Debug, Parser)]
#[command(name = "modalfuse", version, about = "Multi-modal volume classification with a CNN + transformer hybrid")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train repeated runs on a stored dataset and write the artifacts.
    Train(TrainArgs),
    /// Evaluate the checkpoint of a training output directory.
    Eval(EvalArgs),
    /// Run the variant × K grid and print the comparison table.
    Ablate(AblateArgs),
    /// Run the gradient-check suite.
    Gradcheck(GradcheckArgs),
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Parameter and multiply-accumulate counts per variant.
    Params(ParamsArgs),
}

/// Overrides of the experiment config file. Flags win over the file.
#[derive(Debug, Clone, Default, Args)]
pub struct ExperimentFlags {
    /// Config file with [experiment], [model] and [augment] sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub repeats: Option<usize>,
    /// Model size preset: tiny or small.
    #[arg(long)]
    pub variant: Option<Scale>,
    /// f32 or f64.
    #[arg(long)]
    pub precision: Option<Precision>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Dataset directory written by `synth` or the container format.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Grid divisor K.
    #[arg(long)]
    pub k: Option<usize>,
    /// none, no-transformer or no-cnn.
    #[arg(long)]
    pub ablate: Option<Variant>,
    #[command(flatten)]
    pub experiment: ExperimentFlags,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory of a `train` run.
    #[arg(long)]
    pub run: PathBuf,
    /// Where to write the report; defaults to the run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Evaluate every sample instead of the test split of repeat 0.
    #[arg(long)]
    pub all: bool,
}

#[derive(Debug, Clone, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Grid divisors, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
    pub k: Vec<usize>,
    /// Variants, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "none,no-transformer,no-cnn")]
    pub ablate: Vec<Variant>,
    #[command(flatten)]
    pub experiment: ExperimentFlags,
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Sampled coordinates per parameter tensor of the end-to-end check.
    #[arg(long, default_value_t = 3)]
    pub coords: usize,
    /// Skip the end-to-end model check.
    #[arg(long)]
    pub ops_only: bool,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    /// unimodal or crossmodal.
    #[arg(long)]
    pub task: Task,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 6)]
    pub depth: usize,
    #[arg(long, default_value_t = 64)]
    pub height: usize,
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    /// Standard deviation of the background noise.
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    #[arg(long, default_value_t = 2.0)]
    pub intensity: f64,
    /// Suppress one XOR marker: first or second.
    #[arg(long, value_parser = parse_region)]
    pub mask: Option<MarkerRegion>,
}

#[derive(Debug, Clone, Args)]
pub struct ParamsArgs {
    /// Take the volume geometry from this dataset.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "tiny")]
    pub variant: Scale,
    #[arg(long, default_value_t = 2)]
    pub k: usize,
    #[arg(long, default_value_t = 2)]
    pub classes: usize,
    #[arg(long, default_value_t = 2)]
    pub modalities: usize,
    #[arg(long, default_value_t = 6)]
    pub depth: usize,
    #[arg(long, default_value_t = 64)]
    pub height: usize,
    #[arg(long, default_value_t = 64)]
    pub width: usize,
}

fn parse_region(s: &str) -> Result<MarkerRegion, String> {
    match s {
        "first" => Ok(MarkerRegion::First),
        "second" => Ok(MarkerRegion::Second),
        other => Err(format!("expected first or second, got {other:?}")),
    }
}
