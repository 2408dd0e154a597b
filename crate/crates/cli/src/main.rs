//! `antcensus`: command-line front end for the ant counting pipeline.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Failure classes, each with its own exit status.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags or flag combinations. Exit 1.
    Usage(String),
    /// Malformed or inconsistent input files. Exit 2.
    Data(String),
    /// The detector itself failed. Exit 3.
    Backend(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            Self::Usage(_) => 1,
            Self::Data(_) => 2,
            Self::Backend(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Self::Usage(m) | Self::Data(m) | Self::Backend(m) => m,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "antcensus",
    version,
    about = "Ant detection post-processing: tiling, merging, scoring, heatmaps and time series"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Cut images into a grid of tiles and write a tile manifest.
    Slice(SliceArgs),
    /// Cut label files into per-tile label files.
    SliceLabels(SliceLabelsArgs),
    /// Run a detector over a directory of images.
    Detect(DetectArgs),
    /// Merge per-tile detection files back into full-image files.
    Merge(MergeArgs),
    /// Score detections against ground-truth labels.
    Eval(EvalArgs),
    /// Agreement (r², RMSE) between manual and automatic counts.
    Agree(AgreeArgs),
    /// Render a Gaussian activity heatmap from detections.
    Heatmap(HeatmapArgs),
    /// Count detections over time, optionally split by a line.
    Timeseries(TimeseriesArgs),
    /// Draw reproducible calibration-set index lists.
    SamplePlan(SamplePlanArgs),
}

#[derive(Debug, Args)]
pub struct GridArgs {
    /// Tile columns.
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    pub cols: u32,
    /// Tile rows.
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    pub rows: u32,
    /// Fraction of the base tile size added to interior tile edges, in [0, 0.5).
    #[arg(long, default_value_t = 0.0, value_parser = parse_overlap)]
    pub overlap: f64,
}

#[derive(Debug, Args)]
pub struct SliceArgs {
    /// Directory of .png/.jpg/.jpeg images, or a single image file.
    #[arg(long)]
    pub images: PathBuf,
    #[command(flatten)]
    pub grid: GridArgs,
    /// Output directory for tile images and tiles.csv.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SliceLabelsArgs {
    /// Directory of label files.
    #[arg(long)]
    pub labels: PathBuf,
    /// CSV of image sizes (image_id,width,height).
    #[arg(long)]
    pub sizes: PathBuf,
    #[command(flatten)]
    pub grid: GridArgs,
    /// Minimum visible fraction of a box for it to be kept in a tile.
    #[arg(long, default_value_t = 0.3, value_parser = parse_unit_open_closed)]
    pub min_visibility: f64,
    /// Output directory for per-tile label files and tiles.csv.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendKind {
    /// Replay stored detection or label files.
    Replay,
    /// Deterministically corrupted ground truth.
    Synthetic,
    /// An external command: `<cmd> [args] --input IMG --output TXT`.
    External,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    #[arg(long, value_enum)]
    pub backend: BackendKind,
    /// Directory of images to detect on.
    #[arg(long)]
    pub images: PathBuf,
    /// CSV of image sizes; images not listed are probed from their headers.
    #[arg(long)]
    pub sizes: Option<PathBuf>,
    /// Tile columns; enables sliced detection together with --rows.
    #[arg(long, requires = "rows", value_parser = clap::value_parser!(u32).range(1..))]
    pub cols: Option<u32>,
    /// Tile rows; enables sliced detection together with --cols.
    #[arg(long, requires = "cols", value_parser = clap::value_parser!(u32).range(1..))]
    pub rows: Option<u32>,
    /// Tile overlap fraction in [0, 0.5) for sliced detection.
    #[arg(long, default_value_t = 0.0, value_parser = parse_overlap)]
    pub overlap: f64,
    /// IoU at which duplicate detections across tiles are suppressed.
    #[arg(long, default_value_t = 0.5, value_parser = parse_unit_open_closed)]
    pub merge_iou: f64,
    /// Minimum visible fraction for replayed or synthetic boxes cut by a tile.
    #[arg(long, default_value_t = 0.3, value_parser = parse_unit_open_closed)]
    pub min_visibility: f64,
    /// [replay] Directory of stored detection or label files.
    #[arg(long, required_if_eq("backend", "replay"))]
    pub source: Option<PathBuf>,
    /// [synthetic] Directory of ground-truth label files.
    #[arg(long, required_if_eq("backend", "synthetic"))]
    pub gt: Option<PathBuf>,
    /// [synthetic] Fraction of ground-truth boxes dropped.
    #[arg(long, default_value_t = 0.0, value_parser = parse_unit_closed)]
    pub fn_rate: f64,
    /// [synthetic] False boxes added per ground-truth box.
    #[arg(long, default_value_t = 0.0, value_parser = parse_non_negative)]
    pub fp_rate: f64,
    /// [synthetic] Maximum center shift in pixels.
    #[arg(long, default_value_t = 0.0, value_parser = parse_non_negative)]
    pub center_jitter: f64,
    /// [synthetic] Maximum relative size change.
    #[arg(long, default_value_t = 0.0, value_parser = parse_non_negative)]
    pub size_jitter: f64,
    /// [synthetic] Random seed (required).
    #[arg(long, required_if_eq("backend", "synthetic"))]
    pub seed: Option<u64>,
    /// [external] Command to run per image or tile.
    #[arg(long, required_if_eq("backend", "external"))]
    pub command: Option<PathBuf>,
    /// [external] Extra argument placed before --input; repeatable.
    #[arg(long = "command-arg", allow_hyphen_values = true)]
    pub command_args: Vec<String>,
    /// [external] Seconds before a call is killed [default: $ANTCENSUS_EXTERNAL_TIMEOUT_SECS or 120].
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub timeout: Option<u64>,
    /// [external] Concurrent invocations.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    pub workers: u32,
    /// Output directory for per-image detection files.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MergeArgs {
    /// Directory of per-tile detection files named <tile_id>.txt.
    #[arg(long)]
    pub dets: PathBuf,
    /// Tile manifest (tiles.csv) written by `slice`.
    #[arg(long)]
    pub manifest: PathBuf,
    /// IoU at which duplicate detections are suppressed.
    #[arg(long, default_value_t = 0.5, value_parser = parse_unit_open_closed)]
    pub merge_iou: f64,
    /// Output directory for per-image detection files.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory of predicted detection files.
    #[arg(long)]
    pub pred: PathBuf,
    /// Directory of ground-truth label files.
    #[arg(long)]
    pub gt: PathBuf,
    /// CSV of image sizes (image_id,width,height).
    #[arg(long)]
    pub sizes: PathBuf,
    /// Minimum IoU for a prediction to match a ground-truth box, in (0, 1].
    #[arg(long, default_value_t = 0.6, value_parser = parse_unit_open_closed)]
    pub iou: f64,
    /// Predictions below this confidence are ignored, in [0, 1].
    #[arg(long, default_value_t = 0.25, value_parser = parse_unit_closed)]
    pub conf: f64,
    /// Report CSV path, or `-` for standard output.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AgreeArgs {
    /// Manual counts: an image_id,count CSV or a directory of label files.
    #[arg(long)]
    pub manual: PathBuf,
    /// Automatic counts: an image_id,count CSV or a directory of detection files.
    #[arg(long)]
    pub auto: PathBuf,
    /// Confidence threshold applied when counting a detection directory.
    #[arg(long, default_value_t = 0.25, value_parser = parse_unit_closed)]
    pub conf: f64,
    /// Report CSV path, or `-` for standard output.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KernelArg {
    /// exp(-d²/2r²)
    Standard,
    /// exp(-d/2r²)
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RadiusArg {
    /// r = (w + h) / 2
    MeanExtent,
    /// r = (w + h) / 4
    HalfExtent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ColormapArg {
    Inferno,
    Hot,
    Gray,
}

#[derive(Debug, Args)]
pub struct HeatmapArgs {
    /// Directory of detection files.
    #[arg(long)]
    pub dets: PathBuf,
    /// CSV of image sizes (image_id,width,height).
    #[arg(long)]
    pub sizes: PathBuf,
    /// Side length of the square accumulation grid, in cells.
    #[arg(long, default_value_t = 1000, value_parser = clap::value_parser!(u32).range(1..=20000))]
    pub grid: u32,
    #[arg(long, value_enum, default_value_t = KernelArg::Standard)]
    pub kernel: KernelArg,
    #[arg(long, value_enum, default_value_t = RadiusArg::MeanExtent)]
    pub radius: RadiusArg,
    #[arg(long, value_enum, default_value_t = ColormapArg::Inferno)]
    pub colormap: ColormapArg,
    /// Detections below this confidence are ignored.
    #[arg(long, default_value_t = 0.25, value_parser = parse_unit_closed)]
    pub conf: f64,
    /// Output PNG path.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the unscaled grid as CSV (`-` for standard output).
    #[arg(long)]
    pub raw: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TimeseriesArgs {
    /// Directory of detection files.
    #[arg(long)]
    pub dets: PathBuf,
    /// CSV of capture times (image_id,timestamp): hours or ISO-8601.
    #[arg(long)]
    pub times: PathBuf,
    /// Split line y = a*x + b in image pixels, given as `a,b`.
    #[arg(
        long,
        value_name = "A,B",
        allow_hyphen_values = true,
        conflicts_with = "line_vertical"
    )]
    pub line: Option<String>,
    /// Vertical split line x = X in image pixels.
    #[arg(long, value_name = "X", allow_hyphen_values = true)]
    pub line_vertical: Option<f64>,
    /// Bin width in hours.
    #[arg(long, value_parser = parse_positive)]
    pub bin: Option<f64>,
    /// CSV of image sizes; required with --line or --line-vertical.
    #[arg(long)]
    pub sizes: Option<PathBuf>,
    /// Detections below this confidence are ignored.
    #[arg(long, default_value_t = 0.25, value_parser = parse_unit_closed)]
    pub conf: f64,
    /// Series CSV path, or `-` for standard output.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write an SVG line plot.
    #[arg(long)]
    pub plot: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SamplePlanArgs {
    /// Number of images in the pool.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub pool: u64,
    /// Draws per replicate; above the pool size, draws repeat.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub n: u64,
    /// Number of replicates.
    #[arg(long, default_value_t = 30, value_parser = clap::value_parser!(u64).range(1..))]
    pub replicates: u64,
    /// Random seed (required).
    #[arg(long)]
    pub seed: u64,
    /// Plan CSV path (replicate,draw,index), or `-` for standard output.
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_f64(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("`{s}` is not finite"))
    }
}

fn parse_unit_open_closed(s: &str) -> Result<f64, String> {
    let v = parse_f64(s)?;
    if v > 0.0 && v <= 1.0 {
        Ok(v)
    } else {
        Err(format!("{v} is outside (0, 1]"))
    }
}

fn parse_unit_closed(s: &str) -> Result<f64, String> {
    let v = parse_f64(s)?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is outside [0, 1]"))
    }
}

fn parse_overlap(s: &str) -> Result<f64, String> {
    let v = parse_f64(s)?;
    if (0.0..0.5).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is outside [0, 0.5)"))
    }
}

fn parse_non_negative(s: &str) -> Result<f64, String> {
    let v = parse_f64(s)?;
    if v >= 0.0 {
        Ok(v)
    } else {
        Err(format!("{v} is negative"))
    }
}

fn parse_positive(s: &str) -> Result<f64, String> {
    let v = parse_f64(s)?;
    if v > 0.0 {
        Ok(v)
    } else {
        Err(format!("{v} is not positive"))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let rendered = e.to_string();
            let first = rendered.lines().next().unwrap_or("invalid arguments");
            eprintln!("{first}");
            eprintln!("run with --help for usage");
            return ExitCode::from(1);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}
