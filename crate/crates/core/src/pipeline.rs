//! Single-pass and two-pass (native + upscaled) inference.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cocodata::{AnnotatedDataset, Detection, DetectionSet, ImageRecord};
use crate::detector::{DetectRequest, Detector, ImageSource, ScaleTag};
use crate::error::{Error, Result};
use crate::geometry::{clip_box, iou, scale_box, BBox};
use crate::raster;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpTestConfig {
    /// Magnification of the second pass.
    pub alpha: f64,
    /// Second-pass boxes are kept below `small_gate_max * gate_margin` (native area).
    pub small_gate_max: f64,
    /// First-pass boxes are kept from `large_gate_min / gate_margin` upward.
    pub large_gate_min: f64,
    pub gate_margin: f64,
    pub nms_iou: f64,
    pub score_floor: f64,
}

impl Default for UpTestConfig {
    fn default() -> Self {
        UpTestConfig {
            alpha: 2.0,
            small_gate_max: 1024.0,
            large_gate_min: 1024.0,
            gate_margin: 1.25,
            nms_iou: 0.5,
            score_floor: 0.05,
        }
    }
}

impl UpTestConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 1.0 && self.alpha.is_finite()) {
            return Err(Error::invalid(format!(
                "alpha must exceed 1, got {}",
                self.alpha
            )));
        }
        if !(self.nms_iou > 0.0 && self.nms_iou < 1.0) {
            return Err(Error::invalid(format!(
                "nms_iou must lie in (0, 1), got {}",
                self.nms_iou
            )));
        }
        if !(self.gate_margin >= 1.0 && self.gate_margin.is_finite()) {
            return Err(Error::invalid("gate_margin must be at least 1"));
        }
        if !(self.small_gate_max > 0.0 && self.large_gate_min >= 0.0) {
            return Err(Error::invalid("gate areas must be positive"));
        }
        if !(0.0..=1.0).contains(&self.score_floor) {
            return Err(Error::invalid("score_floor must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Greedy per-category non-maximum suppression over one image.
///
/// Boxes are visited by descending score (ties keep input order); a box is
/// kept iff its IoU with every kept box of its category is at most
/// `iou_threshold`. Output is in visit order.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Result<Vec<Detection>> {
    if !(0.0..=1.0).contains(&iou_threshold) {
        return Err(Error::invalid(format!(
            "IoU threshold {iou_threshold} outside [0, 1]"
        )));
    }
    if let Some(first) = dets.first() {
        if dets.iter().any(|d| d.image_id != first.image_id) {
            return Err(Error::invalid("nms input spans more than one image"));
        }
    }
    let mut order = Vec::with_capacity(dets.len());
    for (i, d) in dets.iter().enumerate() {
        let s = d
            .score
            .ok_or_else(|| Error::invalid("nms requires scored detections"))?;
        order.push((i, s));
    }
    order.sort_by(|a, b| b.1.total_cmp(&a.1));

    let mut kept_by_cat: HashMap<u64, Vec<BBox>> = HashMap::new();
    let mut out = Vec::new();
    for (i, _) in order {
        let d = &dets[i];
        let kept = kept_by_cat.entry(d.category_id).or_default();
        if kept.iter().all(|k| iou(k, &d.bbox) <= iou_threshold) {
            kept.push(d.bbox);
            out.push(d.clone());
        }
    }
    Ok(out)
}

fn image_path(root: Option<&Path>, img: &ImageRecord) -> PathBuf {
    match root {
        Some(r) => r.join(&img.file_name),
        None => PathBuf::from(&img.file_name),
    }
}

fn request(
    det: &dyn Detector,
    img: &ImageRecord,
    root: Option<&Path>,
    factor: f64,
) -> Result<DetectRequest> {
    let path = image_path(root, img);
    let image = if factor != 1.0 && det.needs_pixels() {
        let buf = raster::load_image(&path)?;
        ImageSource::Buffer(raster::resize_bilinear(&buf, factor)?)
    } else {
        ImageSource::Path(path)
    };
    Ok(DetectRequest {
        image_id: img.image_id,
        image,
        scale_tag: ScaleTag::new(factor)?,
    })
}

fn with_context(image_id: u64, e: Error) -> Error {
    match e {
        e @ (Error::Adapter { .. } | Error::CacheMiss { .. } | Error::MissingScore { .. }) => e,
        other => Error::Adapter {
            image_id,
            message: other.to_string(),
        },
    }
}

fn run_pass(
    det: &dyn Detector,
    img: &ImageRecord,
    root: Option<&Path>,
    factor: f64,
) -> Result<Vec<Detection>> {
    let req = request(det, img, root, factor).map_err(|e| with_context(img.image_id, e))?;
    let mut out = det
        .detect(&req)
        .map_err(|e| with_context(img.image_id, e))?;
    for d in &mut out {
        d.image_id = img.image_id;
    }
    Ok(out)
}

fn collect_ordered(per_image: Vec<Result<Vec<Detection>>>) -> Result<DetectionSet> {
    let mut all = Vec::new();
    for r in per_image {
        all.extend(r?);
    }
    Ok(DetectionSet::new(all))
}

/// Runs the detector once per image at native resolution.
///
/// Scored detections below `score_floor` are dropped; unscored ones pass.
pub fn run_single_pass(
    det: &dyn Detector,
    images: &AnnotatedDataset,
    images_root: Option<&Path>,
    score_floor: f64,
) -> Result<DetectionSet> {
    let per_image: Vec<Result<Vec<Detection>>> = images
        .images
        .par_iter()
        .map(|img| {
            let mut out = run_pass(det, img, images_root, 1.0)?;
            out.retain(|d| d.score.is_none_or(|s| s >= score_floor));
            Ok(out)
        })
        .collect();
    collect_ordered(per_image)
}

fn up_test_image(
    det: &dyn Detector,
    img: &ImageRecord,
    root: Option<&Path>,
    cfg: &UpTestConfig,
) -> Result<Vec<Detection>> {
    let (w, h) = (img.width as f64, img.height as f64);
    let (first, second) = rayon::join(
        || run_pass(det, img, root, 1.0),
        || run_pass(det, img, root, cfg.alpha),
    );
    let min_area = cfg.large_gate_min / cfg.gate_margin;
    let max_area = cfg.small_gate_max * cfg.gate_margin;

    let mut merged = Vec::new();
    for mut d in first? {
        let s = d.require_score()?;
        let Some(b) = clip_box(&d.bbox, w, h) else {
            continue;
        };
        if s < cfg.score_floor || b.area() < min_area {
            continue;
        }
        d.bbox = b;
        d.pass = Some(1);
        merged.push(d);
    }
    for mut d in second? {
        let s = d.require_score()?;
        let back = scale_box(&d.bbox, 1.0 / cfg.alpha)?;
        let Some(b) = clip_box(&back, w, h) else {
            continue;
        };
        if s < cfg.score_floor || b.area() >= max_area {
            continue;
        }
        d.bbox = b;
        d.pass = Some(2);
        merged.push(d);
    }
    nms(&merged, cfg.nms_iou)
}

/// Two-pass inference: native pass for medium/large instances, `alpha`-times
/// upscaled pass for small ones, mapped back, size-gated and merged with NMS.
pub fn run_up_test(
    det: &dyn Detector,
    images: &AnnotatedDataset,
    images_root: Option<&Path>,
    cfg: &UpTestConfig,
) -> Result<DetectionSet> {
    cfg.validate()?;
    let per_image: Vec<Result<Vec<Detection>>> = images
        .images
        .par_iter()
        .map(|img| up_test_image(det, img, images_root, cfg))
        .collect();
    collect_ordered(per_image)
}

/// Two-pass inference over a training split, keeping only the small boxes
/// that came from the upscaled pass (pseudo-label candidates).
pub fn run_teacher(
    det: &dyn Detector,
    train_images: &AnnotatedDataset,
    images_root: Option<&Path>,
    cfg: &UpTestConfig,
) -> Result<DetectionSet> {
    let mut set = run_up_test(det, train_images, images_root, cfg)?;
    set.detections
        .retain(|d| d.pass == Some(2) && d.bbox.area() < cfg.small_gate_max);
    Ok(set)
}
