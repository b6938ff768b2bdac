//! Dataset synthesis: small-instance stripping, downscaled training copies,
//! blur / down-up augmentation and distillation set assembly.
//!
//! Pixel work runs in parallel per image. Ids are allocated afterwards in a
//! single sequential pass so the output does not depend on scheduling.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cocodata::{AnnotatedDataset, Annotation, DetectionSet, ImageRecord};
use crate::error::{Error, Result};
use crate::geometry::{clip_box, scale_box, SizeClass, SizeThresholds};
use crate::raster::{self, GaussianSpec, ImageBuffer};

/// Images narrower or shorter than this after downscaling are skipped.
pub const MIN_SYNTH_DIM: usize = 8;

/// Share of synthetic images in the mixed set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct MixRatio(f64);

impl MixRatio {
    /// Small : medium+large instance ratio of the COCO training split.
    pub const COCO: f64 = 0.414;

    pub fn new(synthetic_fraction: f64) -> Result<Self> {
        if !(synthetic_fraction > 0.0 && synthetic_fraction < 1.0) {
            return Err(Error::invalid(format!(
                "mix fraction must lie in (0, 1), got {synthetic_fraction}"
            )));
        }
        Ok(MixRatio(synthetic_fraction))
    }

    pub fn synthetic_fraction(&self) -> f64 {
        self.0
    }

    /// Number of synthetic images to add to `originals` so that
    /// synthetic : original approximates `f : (1 - f)`.
    pub fn synthetic_count(&self, originals: usize) -> usize {
        (originals as f64 * self.0 / (1.0 - self.0)).round() as usize
    }
}

impl Default for MixRatio {
    fn default() -> Self {
        MixRatio(Self::COCO)
    }
}

impl TryFrom<f64> for MixRatio {
    type Error = Error;
    fn try_from(v: f64) -> Result<Self> {
        MixRatio::new(v)
    }
}

impl From<MixRatio> for f64 {
    fn from(m: MixRatio) -> f64 {
        m.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DownTrainConfig {
    pub beta: f64,
    pub mix: MixRatio,
    pub seed: u64,
}

impl DownTrainConfig {
    pub fn new(beta: f64, mix: MixRatio, seed: u64) -> Result<Self> {
        check_beta(beta)?;
        Ok(DownTrainConfig { beta, mix, seed })
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::invalid(format!(
            "beta must lie in (0, 1), got {beta}"
        )));
    }
    Ok(())
}

/// Pixel transform applied to augmentation copies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum AugmentMode {
    Blur(GaussianSpec),
    ScaleReScale { gamma: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub mode: AugmentMode,
    pub mix: MixRatio,
    pub seed: u64,
}

impl AugmentConfig {
    pub fn new(mode: AugmentMode, mix: MixRatio, seed: u64) -> Result<Self> {
        if let AugmentMode::ScaleReScale { gamma } = mode {
            if !(gamma > 1.0 && gamma.is_finite()) {
                return Err(Error::invalid(format!("gamma must exceed 1, got {gamma}")));
            }
        }
        Ok(AugmentConfig { mode, mix, seed })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub confidence_threshold: f64,
    pub size_thresholds: SizeThresholds,
    pub include_downscaled: bool,
    pub down_beta: f64,
}

impl DistillConfig {
    pub fn new(
        confidence_threshold: f64,
        size_thresholds: SizeThresholds,
        include_downscaled: bool,
        down_beta: f64,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&confidence_threshold) {
            return Err(Error::invalid(format!(
                "confidence threshold must lie in [0, 1], got {confidence_threshold}"
            )));
        }
        check_beta(down_beta)?;
        Ok(DistillConfig {
            confidence_threshold,
            size_thresholds,
            include_downscaled,
            down_beta,
        })
    }
}

/// Where source images are read from and synthetic images are written to.
#[derive(Debug, Clone)]
pub struct SynthesisPaths {
    pub images_root: PathBuf,
    pub output_dir: PathBuf,
}

impl SynthesisPaths {
    /// Reads and writes under the same root.
    pub fn in_place(images_root: impl Into<PathBuf>) -> Self {
        let root = images_root.into();
        SynthesisPaths {
            output_dir: root.clone(),
            images_root: root,
        }
    }

    fn source(&self, img: &ImageRecord) -> PathBuf {
        self.images_root.join(&img.file_name)
    }

    /// Returns (path to write, `file_name` to record) for copy `k` of `img`.
    fn synthetic(&self, img: &ImageRecord, k: usize) -> (PathBuf, String) {
        let src = Path::new(&img.file_name);
        let stem = src
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("image{}", img.image_id));
        let rel = src
            .parent()
            .unwrap_or(Path::new(""))
            .join(format!("{stem}__syn{k}.ppm"));
        let out = self.output_dir.join(&rel);
        let recorded = match self.output_dir.strip_prefix(&self.images_root) {
            Ok(prefix) => prefix.join(&rel),
            Err(_) => out.clone(),
        };
        (out, recorded.to_string_lossy().replace('\\', "/"))
    }
}

/// Provenance of one synthetic image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub source_image_id: u64,
    pub transform: String,
    pub parameters: BTreeMap<String, f64>,
}

/// Sidecar mapping synthetic image ids to their provenance.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SynthManifest {
    pub entries: BTreeMap<u64, ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SkippedImage {
    pub source_image_id: u64,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct SynthesisOutput {
    pub dataset: AnnotatedDataset,
    pub manifest: SynthManifest,
    pub requested: usize,
    pub skipped: Vec<SkippedImage>,
}

/// Removes non-crowd Small annotations. Crowd regions and images stay.
pub fn strip_small(d: &AnnotatedDataset, t: &SizeThresholds) -> AnnotatedDataset {
    AnnotatedDataset {
        images: d.images.clone(),
        annotations: d
            .annotations
            .iter()
            .filter(|a| a.iscrowd || t.class_of(a.area) != SizeClass::Small)
            .cloned()
            .collect(),
        categories: d.categories.clone(),
    }
}

/// Picks source image indices for `count` synthetic copies.
///
/// Without replacement (a seeded shuffle) when `count <= n`, uniform with
/// replacement otherwise.
pub fn select_sources(n: usize, count: usize, seed: u64) -> Vec<usize> {
    if n == 0 {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if count <= n {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        idx.truncate(count);
        idx
    } else {
        (0..count).map(|_| rng.random_range(0..n)).collect()
    }
}

/// Pairs each selected source with its per-source copy index.
fn number_copies(sources: &[usize]) -> Vec<(usize, usize)> {
    let mut seen: HashMap<usize, usize> = HashMap::new();
    sources
        .iter()
        .map(|&s| {
            let k = seen.entry(s).or_insert(0);
            let out = (s, *k);
            *k += 1;
            out
        })
        .collect()
}

fn load_checked(path: &Path, img: &ImageRecord) -> Result<ImageBuffer> {
    let buf = raster::load_image(path)?;
    if buf.width() != img.width as usize || buf.height() != img.height as usize {
        return Err(Error::ImageFormat {
            path: path.to_path_buf(),
            message: format!(
                "image is {}x{} but the dataset records {}x{}",
                buf.width(),
                buf.height(),
                img.width,
                img.height
            ),
        });
    }
    Ok(buf)
}

fn downscaled_dims(img: &ImageRecord, beta: f64) -> (usize, usize) {
    (
        (img.width as f64 * beta).round() as usize,
        (img.height as f64 * beta).round() as usize,
    )
}

/// Result of rendering one synthetic image.
struct Rendered {
    source: usize,
    copy: usize,
    width: u32,
    height: u32,
    file_name: String,
}

fn render_all<F>(
    d: &AnnotatedDataset,
    jobs: &[(usize, usize)],
    paths: &SynthesisPaths,
    render: F,
) -> Result<Vec<std::result::Result<Rendered, SkippedImage>>>
where
    F: Fn(&ImageRecord) -> Result<std::result::Result<ImageBuffer, String>> + Sync,
{
    jobs.par_iter()
        .map(|&(source, copy)| {
            let img = &d.images[source];
            match render(img)? {
                Ok(buf) => {
                    let (out, file_name) = paths.synthetic(img, copy);
                    raster::save_image(&buf, &out)?;
                    Ok(Ok(Rendered {
                        source,
                        copy,
                        width: buf.width() as u32,
                        height: buf.height() as u32,
                        file_name,
                    }))
                }
                Err(reason) => {
                    log::warn!(
                        "skipping synthetic copy of image {}: {reason}",
                        img.image_id
                    );
                    Ok(Err(SkippedImage {
                        source_image_id: img.image_id,
                        reason,
                    }))
                }
            }
        })
        .collect()
}

/// Sequential id allocation for rendered copies.
struct Assembler {
    next_image: u64,
    next_ann: u64,
}

impl Assembler {
    fn new(d: &AnnotatedDataset) -> Self {
        Assembler {
            next_image: d.max_image_id() + 1,
            next_ann: d.max_ann_id() + 1,
        }
    }

    fn image(&mut self, r: &Rendered) -> ImageRecord {
        let id = self.next_image;
        self.next_image += 1;
        ImageRecord {
            image_id: id,
            width: r.width,
            height: r.height,
            file_name: r.file_name.clone(),
        }
    }

    fn ann(&mut self, src: &Annotation, image_id: u64) -> Annotation {
        let id = self.next_ann;
        self.next_ann += 1;
        Annotation {
            ann_id: id,
            image_id,
            ..src.clone()
        }
    }
}

/// Adds downscaled copies of a sample of the images.
///
/// Copies get fresh ids; their boxes are scaled by `beta` and areas by
/// `beta^2`. The input is expected to be stripped of small instances already.
pub fn synthesize_down_train(
    d: &AnnotatedDataset,
    paths: &SynthesisPaths,
    cfg: &DownTrainConfig,
) -> Result<SynthesisOutput> {
    check_beta(cfg.beta)?;
    let requested = cfg.mix.synthetic_count(d.images.len());
    let jobs = number_copies(&select_sources(d.images.len(), requested, cfg.seed));
    let beta = cfg.beta;
    let rendered = render_all(d, &jobs, paths, |img| {
        let (w, h) = downscaled_dims(img, beta);
        if w < MIN_SYNTH_DIM || h < MIN_SYNTH_DIM {
            return Ok(Err(format!(
                "downscaled size {w}x{h} is below {MIN_SYNTH_DIM} px"
            )));
        }
        let src = paths.source(img);
        let buf = load_checked(&src, img)?;
        Ok(Ok(raster::resize_bilinear(&buf, beta)?))
    })?;

    let by_image = d.annotations_by_image();
    let mut out = d.clone();
    let mut manifest = SynthManifest::default();
    let mut skipped = Vec::new();
    let mut ids = Assembler::new(d);
    for r in rendered {
        let r = match r {
            Ok(r) => r,
            Err(s) => {
                skipped.push(s);
                continue;
            }
        };
        let src = &d.images[r.source];
        let rec = ids.image(&r);
        for a in by_image.get(&src.image_id).into_iter().flatten() {
            let mut copy = ids.ann(a, rec.image_id);
            copy.bbox = scale_box(&a.bbox, beta)?;
            copy.area = a.area * beta * beta;
            out.annotations.push(copy);
        }
        manifest.entries.insert(
            rec.image_id,
            ManifestEntry {
                source_image_id: src.image_id,
                transform: "downscale".into(),
                parameters: BTreeMap::from([("beta".into(), beta), ("copy".into(), r.copy as f64)]),
            },
        );
        out.images.push(rec);
    }
    out.validate()?;
    Ok(SynthesisOutput {
        dataset: out,
        manifest,
        requested,
        skipped,
    })
}

/// Adds blurred or down-up resampled copies of a sample of the images.
///
/// Copies keep the source dimensions and annotation geometry; only pixels change.
pub fn synthesize_augmented(
    d: &AnnotatedDataset,
    paths: &SynthesisPaths,
    cfg: &AugmentConfig,
) -> Result<SynthesisOutput> {
    let cfg = AugmentConfig::new(cfg.mode, cfg.mix, cfg.seed)?;
    let requested = cfg.mix.synthetic_count(d.images.len());
    let jobs = number_copies(&select_sources(d.images.len(), requested, cfg.seed));
    let rendered = render_all(d, &jobs, paths, |img| {
        if let AugmentMode::ScaleReScale { gamma } = cfg.mode {
            let (w, h) = downscaled_dims(img, 1.0 / gamma);
            if (img.width as f64) < gamma || (img.height as f64) < gamma || w == 0 || h == 0 {
                return Ok(Err(format!("image smaller than gamma = {gamma}")));
            }
        }
        let buf = load_checked(&paths.source(img), img)?;
        Ok(Ok(match cfg.mode {
            AugmentMode::Blur(g) => raster::gaussian_blur(&buf, &g),
            AugmentMode::ScaleReScale { gamma } => raster::down_up(&buf, gamma)?,
        }))
    })?;

    let (transform, params): (&str, Vec<(&str, f64)>) = match cfg.mode {
        AugmentMode::Blur(g) => (
            "gaussian_blur",
            vec![
                ("kernel_size", g.kernel_size() as f64),
                ("sigma", g.sigma()),
            ],
        ),
        AugmentMode::ScaleReScale { gamma } => ("down_up", vec![("gamma", gamma)]),
    };

    let by_image = d.annotations_by_image();
    let mut out = d.clone();
    let mut manifest = SynthManifest::default();
    let mut skipped = Vec::new();
    let mut ids = Assembler::new(d);
    for r in rendered {
        let r = match r {
            Ok(r) => r,
            Err(s) => {
                skipped.push(s);
                continue;
            }
        };
        let src = &d.images[r.source];
        let rec = ids.image(&r);
        for a in by_image.get(&src.image_id).into_iter().flatten() {
            let copy = ids.ann(a, rec.image_id);
            out.annotations.push(copy);
        }
        let mut parameters: BTreeMap<String, f64> =
            params.iter().map(|(k, v)| (k.to_string(), *v)).collect();
        parameters.insert("copy".into(), r.copy as f64);
        manifest.entries.insert(
            rec.image_id,
            ManifestEntry {
                source_image_id: src.image_id,
                transform: transform.into(),
                parameters,
            },
        );
        out.images.push(rec);
    }
    out.validate()?;
    Ok(SynthesisOutput {
        dataset: out,
        manifest,
        requested,
        skipped,
    })
}

/// Confidence thresholds swept for the pseudo-label count curve.
pub fn threshold_sweep() -> Vec<f64> {
    (0..=20).map(|i| i as f64 * 0.05).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThresholdCount {
    pub threshold: f64,
    pub accepted: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistillReport {
    pub confidence_threshold: f64,
    pub pseudo_candidates: usize,
    pub pseudo_accepted: usize,
    pub rejected_low_score: usize,
    pub rejected_not_small: usize,
    pub rejected_outside_image: usize,
    pub downscaled_images: usize,
    pub downscaled_small_instances: usize,
    /// Accepted pseudo-label count for each swept threshold.
    pub threshold_curve: Vec<ThresholdCount>,
}

#[derive(Debug, Clone)]
pub struct DistillOutput {
    pub dataset: AnnotatedDataset,
    pub manifest: SynthManifest,
    pub report: DistillReport,
    pub skipped: Vec<SkippedImage>,
}

/// Builds the single-pass student's training set.
///
/// Keeps the medium/large ground truth, adds teacher detections scoring above
/// the threshold whose boxes fall in the small range, and optionally adds one
/// downscaled copy per image carrying only the annotations that became small.
pub fn assemble_distillation(
    d_ml: &AnnotatedDataset,
    pseudo: &DetectionSet,
    cfg: &DistillConfig,
    paths: &SynthesisPaths,
) -> Result<DistillOutput> {
    let cfg = DistillConfig::new(
        cfg.confidence_threshold,
        cfg.size_thresholds,
        cfg.include_downscaled,
        cfg.down_beta,
    )?;
    let t = cfg.size_thresholds;
    let small: Vec<u64> = d_ml
        .annotations
        .iter()
        .filter(|a| !a.iscrowd && t.class_of(a.area) == SizeClass::Small)
        .map(|a| a.ann_id)
        .collect();
    if !small.is_empty() {
        return Err(Error::invalid(format!(
            "distillation input must hold only medium/large annotations; {} small ones found",
            small.len()
        )));
    }
    pseudo.validate_against(d_ml)?;
    pseudo.require_scores()?;
    let cats: std::collections::BTreeSet<u64> = d_ml.categories.iter().map(|c| c.id).collect();
    let bad_cats: Vec<u64> = pseudo
        .detections
        .iter()
        .map(|p| p.category_id)
        .filter(|c| !cats.contains(c))
        .collect();
    if !bad_cats.is_empty() {
        return Err(Error::Referential {
            message: "pseudo labels reference unknown categories".into(),
            ids: bad_cats,
        });
    }

    let small_max = t.small_max();
    let threshold_curve = threshold_sweep()
        .into_iter()
        .map(|tau| ThresholdCount {
            threshold: tau,
            accepted: pseudo
                .detections
                .iter()
                .filter(|p| p.score.unwrap_or(0.0) > tau && p.bbox.area() < small_max)
                .count(),
        })
        .collect();

    let images = d_ml.image_index();
    let mut out = d_ml.clone();
    let mut next_ann = d_ml.max_ann_id() + 1;
    let mut report = DistillReport {
        confidence_threshold: cfg.confidence_threshold,
        pseudo_candidates: pseudo.len(),
        pseudo_accepted: 0,
        rejected_low_score: 0,
        rejected_not_small: 0,
        rejected_outside_image: 0,
        downscaled_images: 0,
        downscaled_small_instances: 0,
        threshold_curve,
    };
    for p in &pseudo.detections {
        let score = p.require_score()?;
        if score <= cfg.confidence_threshold {
            report.rejected_low_score += 1;
            continue;
        }
        if p.bbox.area() >= small_max {
            report.rejected_not_small += 1;
            continue;
        }
        let img = images[&p.image_id];
        let Some(bbox) = clip_box(&p.bbox, img.width as f64, img.height as f64) else {
            report.rejected_outside_image += 1;
            continue;
        };
        out.annotations.push(Annotation {
            ann_id: next_ann,
            image_id: p.image_id,
            category_id: p.category_id,
            bbox,
            area: bbox.area(),
            iscrowd: false,
        });
        next_ann += 1;
        report.pseudo_accepted += 1;
    }

    let mut manifest = SynthManifest::default();
    let mut skipped = Vec::new();
    if cfg.include_downscaled {
        let beta = cfg.down_beta;
        let by_image = d_ml.annotations_by_image();
        // only images that yield at least one small instance are rendered
        let jobs: Vec<(usize, usize)> = d_ml
            .images
            .iter()
            .enumerate()
            .filter(|(_, img)| {
                by_image
                    .get(&img.image_id)
                    .into_iter()
                    .flatten()
                    .any(|a| !a.iscrowd && a.area * beta * beta < small_max)
            })
            .map(|(i, _)| (i, 0))
            .collect();
        let rendered = render_all(d_ml, &jobs, paths, |img| {
            let (w, h) = downscaled_dims(img, beta);
            if w < MIN_SYNTH_DIM || h < MIN_SYNTH_DIM {
                return Ok(Err(format!(
                    "downscaled size {w}x{h} is below {MIN_SYNTH_DIM} px"
                )));
            }
            let buf = load_checked(&paths.source(img), img)?;
            Ok(Ok(raster::resize_bilinear(&buf, beta)?))
        })?;
        let mut ids = Assembler {
            next_image: d_ml.max_image_id() + 1,
            next_ann,
        };
        for r in rendered {
            let r = match r {
                Ok(r) => r,
                Err(s) => {
                    skipped.push(s);
                    continue;
                }
            };
            let src = &d_ml.images[r.source];
            let rec = ids.image(&r);
            for a in by_image.get(&src.image_id).into_iter().flatten() {
                let area = a.area * beta * beta;
                if !a.iscrowd && area >= small_max {
                    continue;
                }
                let mut copy = ids.ann(a, rec.image_id);
                copy.bbox = scale_box(&a.bbox, beta)?;
                copy.area = area;
                if !a.iscrowd {
                    report.downscaled_small_instances += 1;
                }
                out.annotations.push(copy);
            }
            manifest.entries.insert(
                rec.image_id,
                ManifestEntry {
                    source_image_id: src.image_id,
                    transform: "downscale_small_only".into(),
                    parameters: BTreeMap::from([("beta".into(), beta)]),
                },
            );
            out.images.push(rec);
            report.downscaled_images += 1;
        }
    }
    out.validate()?;
    Ok(DistillOutput {
        dataset: out,
        manifest,
        report,
        skipped,
    })
}
