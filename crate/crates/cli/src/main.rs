//! `umbra`: train the shadow detector's two models, run it on images and
//! score it against ground-truth masks.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Bad invocation: unknown flag, missing or invalid value, bad config file.
#[derive(Debug)]
pub struct UsageError(pub String);

const CONFIG_HELP: &str = "\
CONFIGURATION FILE
  --config FILE reads flat `key = value` lines. Blank lines and lines
  starting with # are ignored. Keys are the long flag names without the
  leading dashes (underscores are accepted for dashes). Flags given on the
  command line override the file; keys a subcommand does not use are
  ignored. Recognized keys:
    alpha threshold spatial-bandwidth range-bandwidth min-region-size
    C svm-tolerance cv-folds textons per-class epochs batch-size
    learning-rate momentum seed layout subset test-fraction jobs

ENVIRONMENT
  UMBRA_LOG   log filter for diagnostics on stderr (error, warn, info,
              debug, trace) [default: info]

EXIT STATUS
  0 success, 1 usage error, 2 runtime error";

#[derive(Debug, Parser)]
#[command(name = "umbra", version, about, after_long_help = CONFIG_HELP)]
pub struct Cli {
    /// Flat key = value configuration file; see --help
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Worker threads for parallel stages [default: one per core]
    #[arg(long, global = true, value_name = "N")]
    pub jobs: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset of textured scenes with polygon shadows
    Synth(SynthArgs),
    /// Train the region SVM that produces the shadow prior
    TrainSvm(TrainSvmArgs),
    /// Train the patch CNN on RGB plus prior patches
    TrainCnn(TrainCnnArgs),
    /// Detect shadows in one image
    Detect(DetectArgs),
    /// Score the detector on a dataset with ground-truth masks
    Evaluate(EvaluateArgs),
    /// Time detection on synthetic scenes and count CNN evaluations
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Number of image/mask pairs
    #[arg(long, default_value_t = 64)]
    pub n: usize,
    /// Side length in pixels
    #[arg(long, default_value_t = 128)]
    pub size: usize,
    /// Generator seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; receives Images/ and Masks/
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct SegmentArgs {
    /// Mean-shift spatial bandwidth in pixels [default: 8]
    #[arg(long, value_name = "PX")]
    pub spatial_bandwidth: Option<f64>,
    /// Mean-shift range bandwidth in Lab units [default: 8]
    #[arg(long, value_name = "LAB")]
    pub range_bandwidth: Option<f64>,
    /// Regions smaller than this are merged into a neighbour [default: 100]
    #[arg(long, value_name = "PX")]
    pub min_region_size: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subset {
    All,
    Train,
    Test,
}

impl std::str::FromStr for Subset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "all" => Ok(Subset::All),
            "train" => Ok(Subset::Train),
            "test" => Ok(Subset::Test),
            _ => Err(format!("expected all, train or test, got {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Dataset root with Images/+Masks/ or ShadowImages/+ShadowMasks/
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Directory layout: images-masks or sbu [default: detected]
    #[arg(long)]
    pub layout: Option<String>,
    /// Pairs to use: all, train or test of a seeded split [default: all]
    #[arg(long)]
    pub subset: Option<Subset>,
    /// Share of pairs in the test split [default: 0.25]
    #[arg(long, value_name = "F")]
    pub test_fraction: Option<f64>,
    /// Seed for the split and for training [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainSvmArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Output model file
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// SVM box constraint [default: 1]
    #[arg(long = "C", value_name = "C")]
    pub c: Option<f64>,
    /// SMO stopping tolerance on the KKT violation [default: 0.001]
    #[arg(long, value_name = "TOL")]
    pub svm_tolerance: Option<f64>,
    /// Folds for the out-of-fold Platt calibration [default: 3]
    #[arg(long, value_name = "K")]
    pub cv_folds: Option<usize>,
    /// Texton dictionary size [default: 64]
    #[arg(long, value_name = "K")]
    pub textons: Option<usize>,
    #[command(flatten)]
    pub segment: SegmentArgs,
}

#[derive(Debug, Args)]
pub struct TrainCnnArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Trained SVM model
    #[arg(long, value_name = "FILE")]
    pub svm: PathBuf,
    /// Output model file
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Patches per class and image before balancing [default: 20]
    #[arg(long, value_name = "N")]
    pub per_class: Option<usize>,
    /// Training epochs [default: 10]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Mini-batch size [default: 64]
    #[arg(long, value_name = "N")]
    pub batch_size: Option<usize>,
    /// SGD learning rate [default: 0.01]
    #[arg(long, value_name = "LR")]
    pub learning_rate: Option<f64>,
    /// SGD momentum [default: 0.9]
    #[arg(long)]
    pub momentum: Option<f64>,
    #[command(flatten)]
    pub segment: SegmentArgs,
}

#[derive(Debug, Clone, Args)]
pub struct DetectorArgs {
    /// Trained SVM model
    #[arg(long, value_name = "FILE")]
    pub svm: PathBuf,
    /// Trained CNN model
    #[arg(long, value_name = "FILE")]
    pub cnn: PathBuf,
    /// Regions with s_i >= alpha * max s are edge-refined [default: 0.2]
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Pixels with probability >= threshold are shadow [default: 0.5]
    #[arg(long)]
    pub threshold: Option<f64>,
    #[command(flatten)]
    pub segment: SegmentArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TimingFormat {
    Text,
    Json,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    /// Input PNG or PPM image
    #[arg(long, value_name = "FILE")]
    pub image: PathBuf,
    #[command(flatten)]
    pub detector: DetectorArgs,
    /// Refined probability map as 8-bit grayscale PNG, round(255 p)
    #[arg(long, value_name = "FILE")]
    pub out_prob: Option<PathBuf>,
    /// Binary shadow mask PNG
    #[arg(long, value_name = "FILE")]
    pub out_mask: Option<PathBuf>,
    /// Also write the prior, region map, refined map, mask and regions
    #[arg(long, value_name = "DIR")]
    pub dump_stages: Option<PathBuf>,
    /// Print per-stage durations and the CNN evaluation count
    #[arg(long, value_name = "FORMAT")]
    pub timing: Option<TimingFormat>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub detector: DetectorArgs,
    /// Accuracy summary as JSON (no wall-clock figures)
    #[arg(long, value_name = "FILE")]
    pub report: Option<PathBuf>,
    /// Per-image detection seconds as JSON
    #[arg(long, value_name = "FILE")]
    pub timing_report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub detector: DetectorArgs,
    /// Number of synthetic scenes
    #[arg(long, default_value_t = 20)]
    pub n: usize,
    /// Scene side length in pixels
    #[arg(long, default_value_t = 256)]
    pub size: usize,
    /// Scene generator seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Per-image results and summary as JSON
    #[arg(long, value_name = "FILE")]
    pub report: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("UMBRA_LOG", "info"))
        .format_timestamp(None)
        .init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(commands::Failure::Usage(e)) => {
            eprintln!("error: {}", e.0);
            eprintln!("\nFor more information, try '--help'.");
            ExitCode::from(1)
        }
        Err(commands::Failure::Runtime(e)) => {
            let mut msg = e.to_string();
            for cause in e.chain().skip(1) {
                let cause = cause.to_string();
                if !msg.contains(&cause) {
                    msg = format!("{msg}: {cause}");
                }
            }
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
