use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "osfsl",
    version,
    about = "Transductive open-set few-shot benchmarks"
)]
#[command(args_override_self = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run every method on the same sampled episodes and summarize.
    Bench(RunArgs),
    /// Sweep the EOL balancing parameter b across imbalance presets.
    #[command(name = "sweep-b")]
    SweepB(SweepArgs),
    /// Toggle the learned logit scale and shift over shared episodes.
    Ablate(RunArgs),
    /// Write a synthetic Gaussian feature pool.
    #[command(name = "gen-synthetic")]
    GenSynthetic(GenArgs),
    /// Compare analytic gradients with finite differences.
    #[command(name = "check-grad")]
    CheckGrad(CheckGradArgs),
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Flat `key = value` file mirroring these flags; flags win.
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Feature table path, or `synth:key=value,...` for a generated pool.
    #[arg(long, default_value = "synth:")]
    pub pool: String,

    /// balanced, ood20, ood50 or ood80.
    #[arg(long, default_value = "balanced")]
    pub preset: String,

    #[arg(long, default_value_t = 1000)]
    pub episodes: usize,

    /// Comma-separated subset of eol, ostim, simpleshot, knn.
    #[arg(long, default_value = "eol,ostim,simpleshot,knn")]
    pub methods: String,

    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Worker threads; 0 uses all cores.
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,

    #[arg(long, default_value = "out")]
    pub out: PathBuf,

    #[command(flatten)]
    pub episode: EpisodeArgs,

    #[command(flatten)]
    pub eol: EolArgs,
}

/// Overrides for the preset's episode shape.
#[derive(Debug, Clone, Default, Args)]
pub struct EpisodeArgs {
    #[arg(long)]
    pub ways: Option<usize>,
    #[arg(long)]
    pub shots: Option<usize>,
    #[arg(long = "outlier-classes")]
    pub outlier_classes: Option<usize>,
    /// Query samples per inlier class.
    #[arg(long = "in-query")]
    pub in_query: Option<usize>,
    /// Query samples per outlier class.
    #[arg(long = "out-query")]
    pub out_query: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct EolArgs {
    /// Balancing parameter; defaults to 0.3/0.5/0.7 for 20/50/80% outliers.
    #[arg(long)]
    pub b: Option<f64>,
    #[arg(long = "lambda-ce", default_value_t = 1.0)]
    pub lambda_ce: f64,
    #[arg(long = "lambda-ma", default_value_t = 1.0)]
    pub lambda_ma: f64,
    #[arg(long = "lambda-co", default_value_t = 1.0)]
    pub lambda_co: f64,
    /// Freeze the per-class logit scale.
    #[arg(long = "no-eta")]
    pub no_eta: bool,
    /// Freeze the per-class logit shift.
    #[arg(long = "no-delta")]
    pub no_delta: bool,
    #[arg(long = "step-size", default_value_t = 0.05)]
    pub step_size: f64,
    #[arg(long, default_value_t = 150)]
    pub iters: usize,
    /// Initial logit scale, also used by the SimpleShot baseline.
    #[arg(long, default_value_t = 10.0)]
    pub eta0: f64,
    /// Sign of the inlier score: `flipped` or `as-written`.
    #[arg(long, default_value = "flipped")]
    pub orientation: String,
    #[arg(long = "knn-k", default_value_t = 3)]
    pub knn_k: usize,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Comma-separated b values.
    #[arg(long = "b-grid", default_value = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9")]
    pub b_grid: String,
}

#[derive(Debug, Clone, Args)]
pub struct GenArgs {
    #[arg(long, default_value_t = 20)]
    pub classes: usize,
    #[arg(long, default_value_t = 60)]
    pub samples: usize,
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    #[arg(long, default_value_t = 6.0)]
    pub scale: f64,
    #[arg(long, default_value_t = 1.0)]
    pub sigma: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// `text` or `binary`.
    #[arg(long, default_value = "text")]
    pub format: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct CheckGradArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Random episodes per method and dimension.
    #[arg(long, default_value_t = 25)]
    pub trials: u64,
    /// Write the report here as JSON as well as printing it.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
