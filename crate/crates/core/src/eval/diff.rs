//! Two-way comparison of detection sets against one ground truth.

use std::collections::{BTreeMap, HashSet};

use serde::Serialize;

use super::matching::{match_image, AreaSource, DetOutcome};
use crate::cocodata::{AnnotatedDataset, Annotation, Detection, DetectionSet};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::raster::{self, ImageBuffer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DiffSide {
    A,
    B,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DiffLabel {
    TpBoth,
    TpOnlyA,
    TpOnlyB,
    Fp,
}

impl DiffLabel {
    /// Overlay color: green, red, light blue.
    pub fn color(&self) -> [u8; 3] {
        match self {
            DiffLabel::TpBoth => [0, 255, 0],
            DiffLabel::TpOnlyA | DiffLabel::TpOnlyB => [255, 0, 0],
            DiffLabel::Fp => [100, 200, 255],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiffBox {
    pub side: DiffSide,
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: BBox,
    pub score: f64,
    pub label: DiffLabel,
    pub gt_ann_id: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct DiffResult {
    pub boxes: Vec<DiffBox>,
}

impl DiffResult {
    pub fn count(&self, label: DiffLabel) -> usize {
        self.boxes.iter().filter(|b| b.label == label).count()
    }

    pub fn for_image(&self, image_id: u64) -> impl Iterator<Item = &DiffBox> {
        self.boxes.iter().filter(move |b| b.image_id == image_id)
    }
}

/// Outcome of one set: per kept detection, its matched ann id or FP.
/// Crowd-matched detections are left out.
fn match_set<'a>(
    groups: &BTreeMap<(u64, u64), Vec<&Annotation>>,
    set: &'a DetectionSet,
    iou_t: f64,
    score_t: f64,
) -> Result<Vec<(&'a Detection, f64, Option<u64>)>> {
    let mut by_key: BTreeMap<(u64, u64), Vec<(&Detection, f64)>> = BTreeMap::new();
    for d in &set.detections {
        let s = d.require_score()?;
        if s >= score_t {
            by_key
                .entry((d.image_id, d.category_id))
                .or_default()
                .push((d, s));
        }
    }
    let mut out = Vec::new();
    for (key, mut dets) in by_key {
        dets.sort_by(|a, b| b.1.total_cmp(&a.1));
        let refs: Vec<&Detection> = dets.iter().map(|(d, _)| *d).collect();
        let gts = groups.get(&key).cloned().unwrap_or_default();
        let m = match_image(&gts, &refs, iou_t, None, AreaSource::AnnotationArea)?;
        for ((d, s), o) in dets.into_iter().zip(m.detections) {
            match o {
                DetOutcome::Tp { ann_id } => out.push((d, s, Some(ann_id))),
                DetOutcome::Fp => out.push((d, s, None)),
                DetOutcome::Ignored => {}
            }
        }
    }
    Ok(out)
}

/// Labels every kept box of both sets: true positive found by both, by only
/// one of them, or false positive. "Found by both" means both sets matched
/// the same ground-truth instance.
pub fn diff_detections(
    gt: &AnnotatedDataset,
    dets_a: &DetectionSet,
    dets_b: &DetectionSet,
    iou_t: f64,
    score_t: f64,
) -> Result<DiffResult> {
    if !(iou_t > 0.0 && iou_t <= 1.0) {
        return Err(Error::invalid(format!(
            "IoU threshold {iou_t} outside (0, 1]"
        )));
    }
    dets_a.validate_against(gt)?;
    dets_b.validate_against(gt)?;
    let mut groups: BTreeMap<(u64, u64), Vec<&Annotation>> = BTreeMap::new();
    for a in &gt.annotations {
        groups
            .entry((a.image_id, a.category_id))
            .or_default()
            .push(a);
    }
    let a = match_set(&groups, dets_a, iou_t, score_t)?;
    let b = match_set(&groups, dets_b, iou_t, score_t)?;
    let found_a: HashSet<u64> = a.iter().filter_map(|x| x.2).collect();
    let found_b: HashSet<u64> = b.iter().filter_map(|x| x.2).collect();

    let mut boxes = Vec::with_capacity(a.len() + b.len());
    for (side, list, other, only) in [
        (DiffSide::A, &a, &found_b, DiffLabel::TpOnlyA),
        (DiffSide::B, &b, &found_a, DiffLabel::TpOnlyB),
    ] {
        for &(d, score, gt_ann_id) in list {
            let label = match gt_ann_id {
                Some(id) if other.contains(&id) => DiffLabel::TpBoth,
                Some(_) => only,
                None => DiffLabel::Fp,
            };
            boxes.push(DiffBox {
                side,
                image_id: d.image_id,
                category_id: d.category_id,
                bbox: d.bbox,
                score,
                label,
                gt_ann_id,
            });
        }
    }
    Ok(DiffResult { boxes })
}

/// Side-by-side overlay: set A drawn on the left copy, set B on the right.
pub fn render_diff_overlay<'a>(
    img: &ImageBuffer,
    boxes: impl IntoIterator<Item = &'a DiffBox>,
) -> Result<ImageBuffer> {
    let (w, h) = (img.width(), img.height());
    let mut canvas = ImageBuffer::filled(2 * w, h, 3, 0.0)?;
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = img.get(x, y, if img.channels() == 1 { 0 } else { c });
                canvas.set(x, y, c, v);
                canvas.set(x + w, y, c, v);
            }
        }
    }
    for b in boxes {
        let offset = match b.side {
            DiffSide::A => 0.0,
            DiffSide::B => w as f64,
        };
        let shifted = BBox::new(b.bbox.x() + offset, b.bbox.y(), b.bbox.w(), b.bbox.h())?;
        let clip_x = (offset, offset + w as f64);
        raster::draw_outline(&mut canvas, &shifted, b.label.color(), 2, clip_x);
    }
    Ok(canvas)
}
