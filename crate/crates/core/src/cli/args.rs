//! Flag definitions. Every configurable field is optional so that values
//! from a JSON config file can fill whatever the command line leaves unset.

use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Deserializer, Serialize};

#[derive(Debug, Parser)]
#[command(
    name = "scaledet",
    version,
    about = "Scale-aware detection dataset and evaluation toolkit"
)]
pub struct Cli {
    /// Worker threads for per-image parallelism.
    #[arg(long, global = true, env = "SCALEDET_JOBS")]
    pub jobs: Option<usize>,

    /// JSON file with defaults for the subcommand's flags; flags win.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Size-class histogram and crowd counts.
    Stats(StatsArgs),
    /// Remove small non-crowd annotations.
    Strip(StripArgs),
    /// Add downscaled copies of training images.
    SynthDown(SynthDownArgs),
    /// Add blurred or down-up resampled copies of training images.
    SynthAug(SynthAugArgs),
    /// Assemble a distillation training set from teacher detections.
    Distill(DistillArgs),
    /// Run a detector in single-pass, two-pass or teacher mode.
    Infer(InferArgs),
    /// COCO-style evaluation.
    Eval(EvalArgs),
    /// Precision/recall of an unscored box set.
    FixedPr(FixedPrArgs),
    /// Compare two detection sets against ground truth.
    Diff(DiffArgs),
    /// Tabulate AP by upscaling factor from a sweep directory.
    Report(ReportArgs),
}

/// A real number given as a decimal or a fraction such as `1/3`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(transparent)]
pub struct Ratio(pub f64);

impl FromStr for Ratio {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let v = match s.split_once('/') {
            Some((n, d)) => {
                let n: f64 = n
                    .trim()
                    .parse()
                    .map_err(|_| format!("bad numerator in {s:?}"))?;
                let d: f64 = d
                    .trim()
                    .parse()
                    .map_err(|_| format!("bad denominator in {s:?}"))?;
                if d == 0.0 {
                    return Err(format!("zero denominator in {s:?}"));
                }
                n / d
            }
            None => s.parse().map_err(|_| format!("not a number: {s:?}"))?,
        };
        if !v.is_finite() {
            return Err(format!("not finite: {s:?}"));
        }
        Ok(Ratio(v))
    }
}

impl<'de> Deserialize<'de> for Ratio {
    fn deserialize<D: Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(de)? {
            Raw::Num(v) => Ok(Ratio(v)),
            Raw::Text(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct SizeArgs {
    /// Upper area bound of the small class (px^2).
    #[arg(long)]
    pub small_max: Option<f64>,
    /// Upper area bound of the medium class (px^2).
    #[arg(long)]
    pub medium_max: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StatsFormat {
    Json,
    Csv,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct StatsArgs {
    #[arg(long)]
    pub gt: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<StatsFormat>,
    /// Output file; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub size: SizeArgs,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct StripArgs {
    #[arg(long)]
    pub gt: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub size: SizeArgs,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct SynthCommon {
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// Directory the dataset's file names are relative to.
    #[arg(long)]
    pub images_root: Option<PathBuf>,
    /// Output dataset JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Where synthetic images go; defaults to the images root.
    #[arg(long)]
    pub out_images: Option<PathBuf>,
    /// Synthetic share of the mixed set.
    #[arg(long)]
    pub mix: Option<Ratio>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct SynthDownArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: SynthCommon,
    /// Downscaling factor, e.g. `1/3`.
    #[arg(long)]
    pub beta: Option<Ratio>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct SynthAugArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: SynthCommon,
    /// Gaussian kernel size (blur mode).
    #[arg(long, conflicts_with = "gamma")]
    pub kernel: Option<usize>,
    /// Gaussian sigma in pixels (blur mode).
    #[arg(long, conflicts_with = "gamma")]
    pub sigma: Option<f64>,
    /// Down-then-up resampling factor (scale mode).
    #[arg(long)]
    pub gamma: Option<Ratio>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct DistillArgs {
    /// Dataset holding only medium/large annotations.
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// Teacher detections.
    #[arg(long)]
    pub pseudo: Option<PathBuf>,
    #[arg(long)]
    pub images_root: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub out_images: Option<PathBuf>,
    #[arg(long)]
    pub conf_thresh: Option<Ratio>,
    /// Also add downscaled copies carrying the instances that become small.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub downscaled: Option<bool>,
    #[arg(long)]
    pub down_beta: Option<Ratio>,
    #[command(flatten)]
    #[serde(flatten)]
    pub size: SizeArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InferMode {
    Single,
    Uptest,
    Teacher,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct InferArgs {
    /// Dataset listing the images (and ground truth for the oracle adapter).
    #[arg(long)]
    pub gt: Option<PathBuf>,
    #[arg(long)]
    pub images_root: Option<PathBuf>,
    /// `oracle[:key=value,...]`, `cached:<file>` or `exec:<command>`.
    #[arg(long)]
    pub adapter: Option<String>,
    /// Per-image timeout of the exec adapter, in seconds.
    #[arg(long)]
    pub adapter_timeout: Option<f64>,
    /// Keep one exec process and stream requests over stdin.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub adapter_batch: Option<bool>,
    /// Concurrent exec invocations.
    #[arg(long)]
    pub adapter_concurrency: Option<usize>,
    #[arg(long, value_enum)]
    pub mode: Option<InferMode>,
    #[arg(long)]
    pub alpha: Option<Ratio>,
    /// `start:stop:step`; writes one file per factor into the `--out` directory.
    #[arg(long)]
    pub alpha_sweep: Option<String>,
    #[arg(long)]
    pub nms_iou: Option<f64>,
    #[arg(long)]
    pub score_floor: Option<f64>,
    #[arg(long)]
    pub gate_margin: Option<f64>,
    #[arg(long)]
    pub small_gate_max: Option<f64>,
    #[arg(long)]
    pub large_gate_min: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct EvalArgs {
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// Detections file, or a directory of them (one report each).
    #[arg(long)]
    pub dets: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub max_dets: Option<usize>,
    #[arg(long)]
    pub recall_samples: Option<usize>,
    /// Comma-separated IoU thresholds.
    #[arg(long, value_delimiter = ',')]
    pub iou_thresholds: Option<Vec<f64>>,
    #[arg(long, value_enum)]
    pub area_source: Option<AreaSourceArg>,
    #[command(flatten)]
    #[serde(flatten)]
    pub size: SizeArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[clap(rename_all = "snake_case")]
pub enum AreaSourceArg {
    AnnotationArea,
    BboxWh,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct FixedPrArgs {
    #[arg(long)]
    pub gt: Option<PathBuf>,
    #[arg(long)]
    pub dets: Option<PathBuf>,
    /// IoU threshold; repeat for several.
    #[arg(long)]
    pub iou: Option<Vec<f64>>,
    /// all, small, medium or large.
    #[arg(long)]
    pub band: Option<String>,
    #[arg(long, value_enum)]
    pub area_source: Option<AreaSourceArg>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub size: SizeArgs,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct DiffArgs {
    #[arg(long)]
    pub gt: Option<PathBuf>,
    #[arg(long)]
    pub a: Option<PathBuf>,
    #[arg(long)]
    pub b: Option<PathBuf>,
    #[arg(long)]
    pub iou: Option<f64>,
    /// Boxes scoring below this are dropped.
    #[arg(long)]
    pub score: Option<f64>,
    /// When given, side-by-side overlays are rendered.
    #[arg(long)]
    pub images_root: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct ReportArgs {
    /// Directory holding per-factor evaluation reports.
    #[arg(long)]
    pub sweep: Option<PathBuf>,
    /// Output CSV; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
