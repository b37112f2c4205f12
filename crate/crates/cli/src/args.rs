use std::path::PathBuf;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};

use cyclodet_core::eval::Interpolation;
use cyclodet_core::labelstore::Split;

#[derive(Debug, Parser)]
#[command(name = "cyclodet", version, about = "Extratropical cyclone tracking, labeling and detection")]
pub struct Cli {
    /// Project configuration (TOML). Missing sections take their defaults.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Project data directory, overriding `data_dir` from the config.
    #[arg(long, global = true, value_name = "DIR")]
    pub data_dir: Option<PathBuf>,

    /// Seed for every random step, overriding the seeds in the config.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,

    /// Print the summary as JSON instead of text.
    #[arg(long, global = true)]
    pub json: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Copy ETCG grids into the project and write the frame index.
    Ingest(IngestArgs),
    /// Render every TTR frame to `images/<frame>.png`.
    Render,
    /// Find cyclone centers in every MSLP frame; writes `centers.jsonl`.
    Centers,
    /// Link centers across frames into tracks; writes `tracks.jsonl`.
    Track,
    /// Suggest a label box around every tracked center; writes `suggestions.jsonl`.
    Suggest,
    /// Generate synthetic grids or a synthetic labeled dataset.
    Synth(SynthArgs),
    /// Freeze the train/test assignment of consensus frames in `splits.json`.
    Split(SplitArgs),
    /// Train the detector on an exported dataset.
    Train(TrainArgs),
    /// Score detections against ground truth.
    Eval(EvalArgs),
    /// Serve the labeling API.
    Serve(ServeArgs),
    /// Write consensus annotations and their frame images as a dataset directory.
    Export(ExportArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// ETCG files, or directories whose `*.etcg` files are all read.
    #[arg(required = true, value_name = "PATH")]
    pub inputs: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(subcommand)]
    pub kind: SynthKind,
}

#[derive(Debug, Subcommand)]
pub enum SynthKind {
    /// Planted Gaussian lows as MSLP grids, a matching TTR proxy and `plant.json`.
    Series(SeriesArgs),
    /// Rendered cyclone images with stage labels, written in the export format.
    Dataset(DatasetArgs),
}

#[derive(Debug, Args)]
pub struct SeriesArgs {
    /// Output directory for `mslp-<frame>.etcg`, `ttr-<frame>.etcg` and `plant.json`.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Number of planted lows.
    #[arg(long, default_value_t = 6)]
    pub lows: usize,
    /// Number of six-hourly frames.
    #[arg(long, default_value_t = 40)]
    pub frames: usize,
    /// Shortest life of a low, in frames.
    #[arg(long, default_value_t = 4)]
    pub min_life: usize,
    /// Longest life of a low, in frames.
    #[arg(long, default_value_t = 12)]
    pub max_life: usize,
    /// Grid columns.
    #[arg(long, default_value_t = 144)]
    pub n_lon: usize,
    /// Grid rows, pole to pole.
    #[arg(long, default_value_t = 73)]
    pub n_lat: usize,
    /// Minimum separation of coexisting lows, in degrees.
    #[arg(long, default_value_t = 20.0)]
    pub min_separation: f64,
    /// Amplitude of uniform pressure noise, in Pa.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    /// Unix time of the first frame.
    #[arg(long, default_value_t = 0)]
    pub start: i64,
}

#[derive(Debug, Args)]
pub struct DatasetArgs {
    /// Output dataset directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Fraction of frames in the test split [default: labels.test_ratio].
    #[arg(long)]
    pub ratio: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    /// Fraction of frames in the test split [default: labels.test_ratio].
    #[arg(long)]
    pub ratio: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory written by `export` or `synth dataset`.
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Checkpoint path [default: <data_dir>/model.json].
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
    /// Loss trace CSV [default: <data_dir>/loss.csv].
    #[arg(long, value_name = "FILE")]
    pub loss_csv: Option<PathBuf>,
    /// Total iterations, overriding train.iterations.
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Learning rate, overriding train.lr.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Batch size, overriding train.batch_size.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Continue from the checkpoint at the output path.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("source").required(true).args(["pred", "data"])))]
pub struct EvalArgs {
    /// Detections as JSON Lines: `{"image", "box", "stage", "score"}`.
    #[arg(long, value_name = "FILE", requires = "gt")]
    pub pred: Option<PathBuf>,
    /// Ground truth as JSON Lines: `{"image", "box", "stage"}` or dataset annotation records.
    #[arg(long, value_name = "FILE", requires = "pred")]
    pub gt: Option<PathBuf>,
    /// Dataset directory to run the model on instead of reading detections.
    #[arg(long, value_name = "DIR", conflicts_with = "pred")]
    pub data: Option<PathBuf>,
    /// Model checkpoint used with --data [default: <data_dir>/model.json].
    #[arg(long, value_name = "FILE", requires = "data")]
    pub model: Option<PathBuf>,
    /// Dataset split scored with --data.
    #[arg(long, value_enum, default_value_t = SplitChoice::Test, requires = "data")]
    pub split: SplitChoice,
    /// Where to write the detections made with --data, in the --pred format.
    #[arg(long, value_name = "FILE", requires = "data")]
    pub detections: Option<PathBuf>,
    /// IoU needed for a true positive, overriding eval.iou_threshold.
    #[arg(long)]
    pub iou: Option<f64>,
    /// AP interpolation, overriding eval.interpolation.
    #[arg(long, value_enum)]
    pub interpolation: Option<InterpolationChoice>,
    /// Per-class AP report CSV.
    #[arg(long, value_name = "FILE")]
    pub report: Option<PathBuf>,
    /// Precision-recall curve CSV.
    #[arg(long, value_name = "FILE")]
    pub curves: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Listen address, overriding service.bind.
    #[arg(long, value_name = "ADDR")]
    pub bind: Option<String>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    /// Output dataset directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Which frames to write.
    #[arg(long, value_enum, default_value_t = SplitChoice::All)]
    pub split: SplitChoice,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitChoice {
    Train,
    Test,
    All,
}

impl SplitChoice {
    pub fn admits(self, split: Split) -> bool {
        match self {
            SplitChoice::Train => split == Split::Train,
            SplitChoice::Test => split == Split::Test,
            SplitChoice::All => true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InterpolationChoice {
    AllPoint,
    #[value(name = "11-point")]
    ElevenPoint,
}

impl From<InterpolationChoice> for Interpolation {
    fn from(c: InterpolationChoice) -> Self {
        match c {
            InterpolationChoice::AllPoint => Interpolation::AllPoint,
            InterpolationChoice::ElevenPoint => Interpolation::ElevenPoint,
        }
    }
}
