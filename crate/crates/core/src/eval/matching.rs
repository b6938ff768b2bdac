//! Greedy IoU matching of one image and category, COCO style.

use serde::{Deserialize, Serialize};

use crate::cocodata::{Annotation, Detection};
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox, SizeClass, SizeThresholds};

/// Which area drives ground-truth size banding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AreaSource {
    /// The annotation's `area` field.
    #[default]
    AnnotationArea,
    /// Box width times height.
    BboxWh,
}

impl AreaSource {
    pub fn of(&self, a: &Annotation) -> f64 {
        match self {
            AreaSource::AnnotationArea => a.area,
            AreaSource::BboxWh => a.bbox.area(),
        }
    }
}

/// Ground-truth size stratum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeBand {
    All,
    Small,
    Medium,
    Large,
}

impl SizeBand {
    pub const ALL: [SizeBand; 4] = [
        SizeBand::All,
        SizeBand::Small,
        SizeBand::Medium,
        SizeBand::Large,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            SizeBand::All => "all",
            SizeBand::Small => "small",
            SizeBand::Medium => "medium",
            SizeBand::Large => "large",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        SizeBand::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown size band {s:?}")))
    }

    /// Half-open area range `[lo, hi)`.
    pub fn range(&self, t: &SizeThresholds) -> AreaRange {
        let (lo, hi) = match self {
            SizeBand::All => (0.0, f64::INFINITY),
            SizeBand::Small => t.range(SizeClass::Small),
            SizeBand::Medium => t.range(SizeClass::Medium),
            SizeBand::Large => t.range(SizeClass::Large),
        };
        AreaRange { lo, hi }
    }
}

impl std::fmt::Display for SizeBand {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AreaRange {
    pub lo: f64,
    pub hi: f64,
}

impl AreaRange {
    pub fn contains(&self, area: f64) -> bool {
        area >= self.lo && area < self.hi
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DetOutcome {
    Tp {
        ann_id: u64,
    },
    Fp,
    /// Matched a crowd region or an out-of-band instance, or is itself out of band.
    Ignored,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GtOutcome {
    Matched { det_index: usize },
    Missed,
    Ignored,
}

/// Per-detection and per-ground-truth results, aligned with the inputs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchOutcome {
    pub detections: Vec<DetOutcome>,
    pub ground_truth: Vec<GtOutcome>,
}

impl MatchOutcome {
    pub fn true_positives(&self) -> usize {
        self.detections
            .iter()
            .filter(|d| matches!(d, DetOutcome::Tp { .. }))
            .count()
    }

    pub fn false_positives(&self) -> usize {
        self.detections
            .iter()
            .filter(|d| **d == DetOutcome::Fp)
            .count()
    }

    pub fn counted_ground_truth(&self) -> usize {
        self.ground_truth
            .iter()
            .filter(|g| **g != GtOutcome::Ignored)
            .count()
    }
}

/// Overlap used for matching: IoU, or intersection over detection area
/// against crowd regions.
pub fn match_overlap(det: &BBox, gt: &BBox, gt_is_crowd: bool) -> f64 {
    if gt_is_crowd {
        (det.intersection_area(gt) / det.area()).clamp(0.0, 1.0)
    } else {
        iou(det, gt)
    }
}

/// Precomputed inputs for matching one image/category at one band.
pub(crate) struct MatchProblem<'a> {
    /// `overlaps[d][g]`
    pub overlaps: &'a [Vec<f64>],
    pub gt_crowd: &'a [bool],
    pub gt_ignore: Vec<bool>,
    pub det_out_of_band: Vec<bool>,
    /// Ground-truth visiting order: non-ignored first, stable.
    pub gt_order: Vec<usize>,
}

impl<'a> MatchProblem<'a> {
    pub fn new(
        overlaps: &'a [Vec<f64>],
        gt_crowd: &'a [bool],
        gt_areas: &[f64],
        det_areas: &[f64],
        band: Option<AreaRange>,
    ) -> Self {
        let gt_ignore: Vec<bool> = gt_crowd
            .iter()
            .zip(gt_areas)
            .map(|(&c, &a)| c || band.is_some_and(|r| !r.contains(a)))
            .collect();
        let det_out_of_band = det_areas
            .iter()
            .map(|&a| band.is_some_and(|r| !r.contains(a)))
            .collect();
        let mut gt_order: Vec<usize> = (0..gt_crowd.len()).collect();
        gt_order.sort_by_key(|&g| gt_ignore[g]);
        MatchProblem {
            overlaps,
            gt_crowd,
            gt_ignore,
            det_out_of_band,
            gt_order,
        }
    }

    /// Greedy matching of detections (already in visiting order) at threshold `t`.
    ///
    /// Returns, for every detection, the matched ground-truth index (if any)
    /// and whether the detection is ignored.
    pub fn solve(&self, t: f64) -> Vec<(Option<usize>, bool)> {
        let mut taken = vec![false; self.gt_crowd.len()];
        let mut out = Vec::with_capacity(self.overlaps.len());
        for row in self.overlaps {
            let mut best = t.min(1.0 - 1e-10);
            let mut m: Option<usize> = None;
            for &g in &self.gt_order {
                if taken[g] && !self.gt_crowd[g] {
                    continue;
                }
                // once a counted instance matched, ignored ones cannot replace it
                if let Some(prev) = m {
                    if !self.gt_ignore[prev] && self.gt_ignore[g] {
                        break;
                    }
                }
                if row[g] < best {
                    continue;
                }
                best = row[g];
                m = Some(g);
            }
            out.push(match m {
                Some(g) => {
                    taken[g] = true;
                    (Some(g), self.gt_ignore[g])
                }
                None => (None, self.det_out_of_band[out.len()]),
            });
        }
        out
    }
}

pub(crate) fn overlap_matrix(dets: &[&Detection], gts: &[&Annotation]) -> Vec<Vec<f64>> {
    dets.iter()
        .map(|d| {
            gts.iter()
                .map(|g| match_overlap(&d.bbox, &g.bbox, g.iscrowd))
                .collect()
        })
        .collect()
}

/// Matches detections of one image and category against its ground truth.
///
/// Detections are visited in the given order (callers sort by descending
/// score and truncate). Each takes the free counted instance with the highest
/// overlap of at least `iou_t`, else an ignored one (crowd region or out of
/// band), which makes it ignored; unmatched detections are false positives
/// unless their own area is outside the band.
pub fn match_image(
    gts: &[&Annotation],
    dets: &[&Detection],
    iou_t: f64,
    band: Option<AreaRange>,
    area_source: AreaSource,
) -> Result<MatchOutcome> {
    let image = gts
        .first()
        .map(|g| g.image_id)
        .or_else(|| dets.first().map(|d| d.image_id));
    let category = gts
        .first()
        .map(|g| g.category_id)
        .or_else(|| dets.first().map(|d| d.category_id));
    if gts.iter().any(|g| Some(g.image_id) != image)
        || dets.iter().any(|d| Some(d.image_id) != image)
    {
        return Err(Error::invalid(
            "match_image inputs span more than one image",
        ));
    }
    if gts.iter().any(|g| Some(g.category_id) != category)
        || dets.iter().any(|d| Some(d.category_id) != category)
    {
        return Err(Error::invalid(
            "match_image inputs span more than one category",
        ));
    }
    let overlaps = overlap_matrix(dets, gts);
    let crowd: Vec<bool> = gts.iter().map(|g| g.iscrowd).collect();
    let gt_areas: Vec<f64> = gts.iter().map(|g| area_source.of(g)).collect();
    let det_areas: Vec<f64> = dets.iter().map(|d| d.bbox.area()).collect();
    let problem = MatchProblem::new(&overlaps, &crowd, &gt_areas, &det_areas, band);
    let solved = problem.solve(iou_t);

    let mut ground_truth: Vec<GtOutcome> = problem
        .gt_ignore
        .iter()
        .map(|&ig| {
            if ig {
                GtOutcome::Ignored
            } else {
                GtOutcome::Missed
            }
        })
        .collect();
    let detections = solved
        .iter()
        .enumerate()
        .map(|(d, &(m, ignored))| match (m, ignored) {
            (_, true) => DetOutcome::Ignored,
            (Some(g), false) => {
                ground_truth[g] = GtOutcome::Matched { det_index: d };
                DetOutcome::Tp {
                    ann_id: gts[g].ann_id,
                }
            }
            (None, false) => DetOutcome::Fp,
        })
        .collect();
    Ok(MatchOutcome {
        detections,
        ground_truth,
    })
}
