use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(
    name = "tsem",
    version,
    about = "Explainable multivariate time-series classification",
    args_override_self = true
)]
pub struct Cli {
    /// Flat TOML file of `flag-name = value` pairs for the chosen subcommand.
    #[arg(long, global = true, env = "TSEM_CONFIG")]
    pub config: Option<PathBuf>,

    /// Worker threads for explain/evaluate (0 = one per core). Output does
    /// not depend on this value.
    #[arg(long, global = true, env = "TSEM_JOBS", default_value_t = 0)]
    pub jobs: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic bump dataset (train/ and test/ splits).
    Generate(GenerateArgs),
    /// Train a classifier and save a model directory.
    Train(TrainArgs),
    /// Write explanation maps (CSV) and overlays (SVG) for selected instances.
    Explain(ExplainArgs),
    /// Score explanation methods and write a report bundle.
    Evaluate(EvaluateArgs),
    /// Average ranks, wins/ties and critical difference of an accuracy table.
    Rank(RankArgs),
    /// Validate a report.json, redraw its figures and print a summary.
    Report(ReportArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    Csv,
    Ts,
}

#[derive(Args, Debug, Serialize)]
pub struct GenerateArgs {
    /// Output directory; receives train/, test/ and generator.json.
    #[arg(long, env = "TSEM_OUT")]
    pub out: PathBuf,
    #[arg(long, env = "TSEM_N_FEATURES", default_value_t = 3)]
    pub n_features: usize,
    #[arg(long, env = "TSEM_SEQ_LENGTH", default_value_t = 64)]
    pub seq_length: usize,
    #[arg(long, env = "TSEM_N_CLASSES", default_value_t = 6)]
    pub n_classes: usize,
    #[arg(long, env = "TSEM_N_PER_CLASS", default_value_t = 100)]
    pub n_per_class: usize,
    /// Bump standard deviation in time steps.
    #[arg(long, env = "TSEM_BUMP_WIDTH", default_value_t = 3.0)]
    pub bump_width: f64,
    #[arg(long, env = "TSEM_AMPLITUDE", default_value_t = 2.0)]
    pub amplitude: f64,
    /// Standard deviation of the white background noise.
    #[arg(long, env = "TSEM_NOISE", default_value_t = 0.3)]
    pub noise: f64,
    #[arg(long, env = "TSEM_SEED", default_value_t = 7)]
    pub seed: u64,
    /// Share of each class that goes to train/.
    #[arg(long, env = "TSEM_TRAIN_RATIO", default_value_t = 0.7)]
    pub train_ratio: f64,
    #[arg(long, env = "TSEM_FORMAT", value_enum, default_value_t = DataFormat::Csv)]
    pub format: DataFormat,
}

#[derive(Args, Debug, Serialize)]
pub struct TrainArgs {
    /// Training data: a CSV directory, a .ts file, or a generated directory
    /// with train/ and test/.
    #[arg(long, env = "TSEM_DATA")]
    pub data: PathBuf,
    /// Held-out data for the reported test accuracy (default: the test/ part
    /// of a generated directory).
    #[arg(long, env = "TSEM_TEST")]
    pub test: Option<PathBuf>,
    /// Model directory to create.
    #[arg(long, env = "TSEM_OUT")]
    pub out: PathBuf,
    /// mtexcnn, xcm or tsem.
    #[arg(long, env = "TSEM_ARCH", default_value = "tsem")]
    pub arch: String,
    /// Window size as a fraction of the series length.
    #[arg(long, env = "TSEM_WINDOW_FRACTION", default_value_t = 0.2)]
    pub window_fraction: f64,
    #[arg(long, env = "TSEM_FILTERS_2D", default_value_t = 16)]
    pub filters_2d: usize,
    #[arg(long, env = "TSEM_FILTERS_1D", default_value_t = 16)]
    pub filters_1d: usize,
    #[arg(long, env = "TSEM_EPOCHS", default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, env = "TSEM_BATCH_SIZE", default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, env = "TSEM_LR", default_value_t = 1e-3)]
    pub lr: f64,
    /// Epochs without training-loss improvement before stopping (0 = never).
    #[arg(long, env = "TSEM_PATIENCE", default_value_t = 10)]
    pub patience: usize,
    #[arg(long, env = "TSEM_SEED", default_value_t = 0)]
    pub seed: u64,
}

/// Attribution settings shared by explain and evaluate.
#[derive(Args, Debug, Clone, Serialize)]
pub struct CamArgs {
    /// Comma-separated method ids, or `all` for the ten CAM methods. The
    /// reference stubs `constant` and `input` are also accepted.
    #[arg(long, env = "TSEM_METHODS", default_value = "all")]
    pub methods: String,
    /// Registry key of the maps the methods read.
    #[arg(long, env = "TSEM_ACTIVATION", default_value = "pre_gap_maps")]
    pub activation: String,
    /// Noisy copies for the smoothed methods.
    #[arg(long, env = "TSEM_SAMPLES", default_value_t = 8)]
    pub samples: usize,
    /// Noise level as a fraction of the value range.
    #[arg(long, env = "TSEM_SIGMA", default_value_t = 0.1)]
    pub sigma: f64,
    /// Integration steps for integrated Score-CAM.
    #[arg(long, env = "TSEM_STEPS", default_value_t = 8)]
    pub steps: usize,
    #[arg(long, env = "TSEM_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Instances to use: `all`, or indices and ranges such as `0-9,15`.
    #[arg(long, env = "TSEM_INSTANCES", default_value = "all")]
    pub instances: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    /// The class the model predicts.
    Predicted,
    /// The ground-truth label.
    Label,
}

#[derive(Args, Debug, Serialize)]
pub struct ExplainArgs {
    /// Model directory written by `train`.
    #[arg(long, env = "TSEM_MODEL")]
    pub model: PathBuf,
    /// Data to explain (a generated directory means its test/ part).
    #[arg(long, env = "TSEM_DATA")]
    pub data: PathBuf,
    #[arg(long, env = "TSEM_OUT")]
    pub out: PathBuf,
    #[command(flatten)]
    pub cam: CamArgs,
    #[arg(long, env = "TSEM_TARGET", value_enum, default_value_t = Target::Predicted)]
    pub target: Target,
    /// raw, minmax or sum1.
    #[arg(long, env = "TSEM_NORMALIZATION", default_value = "raw")]
    pub normalization: String,
    /// Skip the SVG overlays.
    #[arg(long, env = "TSEM_NO_FIGURES")]
    pub no_figures: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Which {
    Faithfulness,
    Causality,
    Spatiotemporality,
    All,
}

#[derive(Args, Debug, Serialize)]
pub struct EvaluateArgs {
    #[arg(long, env = "TSEM_MODEL")]
    pub model: PathBuf,
    #[arg(long, env = "TSEM_DATA")]
    pub data: PathBuf,
    #[arg(long, env = "TSEM_OUT")]
    pub out: PathBuf,
    #[command(flatten)]
    pub cam: CamArgs,
    #[arg(long, env = "TSEM_WHICH", value_enum, default_value_t = Which::All)]
    pub which: Which,
    /// Share of cells removed or inserted per curve step, in (0, 0.5].
    #[arg(long, env = "TSEM_STEP_FRACTION", default_value_t = 0.05)]
    pub step_fraction: f64,
    /// Correlation at or above which a causality record is non-causal.
    #[arg(long, env = "TSEM_THRESHOLD", default_value_t = 0.95)]
    pub threshold: f64,
    /// Largest passing non-causal proportion per axis.
    #[arg(long, env = "TSEM_MAX_PROPORTION", default_value_t = 0.10)]
    pub max_proportion: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum TieArg {
    Average,
    Min,
}

#[derive(Args, Debug, Serialize)]
pub struct RankArgs {
    /// CSV with a `dataset` column followed by one column per model; empty
    /// cells are missing results.
    #[arg(long, env = "TSEM_INPUT")]
    pub input: PathBuf,
    #[arg(long, env = "TSEM_OUT")]
    pub out: PathBuf,
    /// 0.05 or 0.1.
    #[arg(long, env = "TSEM_ALPHA", default_value_t = 0.05)]
    pub alpha: f64,
    #[arg(long, env = "TSEM_TIE_POLICY", value_enum, default_value_t = TieArg::Average)]
    pub tie_policy: TieArg,
}

#[derive(Args, Debug, Serialize)]
pub struct ReportArgs {
    /// report.json, or the directory holding it.
    #[arg(long, env = "TSEM_INPUT")]
    pub input: PathBuf,
    /// Where to redraw figures (default: next to the report).
    #[arg(long, env = "TSEM_OUT")]
    pub out: Option<PathBuf>,
}
