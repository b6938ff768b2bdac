//! COCO-style evaluation.
//!
//! Matching follows the reference COCO protocol: per image and category,
//! detections in descending score order greedily take the best free
//! instance; crowd regions and out-of-band instances act as ignore regions.
//! AP is the mean of 101-point interpolated precision, averaged over
//! categories with ground truth and then over IoU thresholds.

mod ap;
mod diff;
mod matching;
mod report;

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cocodata::{AnnotatedDataset, Annotation, Detection, DetectionSet};
use crate::error::{Error, Result};
use crate::geometry::SizeThresholds;

pub use ap::{average_precision, recall_grid, sampled_curve, SampledCurve};
pub use diff::{diff_detections, render_diff_overlay, DiffBox, DiffLabel, DiffResult, DiffSide};
pub use matching::{
    match_image, match_overlap, AreaRange, AreaSource, DetOutcome, GtOutcome, MatchOutcome,
    SizeBand,
};
pub use report::{pr_curves_csv, report_csv};

use matching::{overlap_matrix, MatchProblem};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
    pub max_dets: usize,
    pub size_thresholds: SizeThresholds,
    pub recall_samples: usize,
    pub area_source: AreaSource,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_thresholds: coco_iou_thresholds(),
            max_dets: 100,
            size_thresholds: SizeThresholds::default(),
            recall_samples: 101,
            area_source: AreaSource::AnnotationArea,
        }
    }
}

/// 0.50, 0.55, ..., 0.95.
pub fn coco_iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iou_thresholds.is_empty() {
            return Err(Error::invalid("at least one IoU threshold is required"));
        }
        if self.iou_thresholds.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
            return Err(Error::invalid("IoU thresholds must lie in (0, 1]"));
        }
        if self.iou_thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("IoU thresholds must be strictly increasing"));
        }
        if self.max_dets == 0 {
            return Err(Error::invalid("max_dets must be at least 1"));
        }
        if self.recall_samples < 2 {
            return Err(Error::invalid("recall_samples must be at least 2"));
        }
        Ok(())
    }
}

/// PR curve of one category at one threshold and size band.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrCurve {
    pub category_id: u64,
    pub iou_threshold: f64,
    pub band: SizeBand,
    pub num_gt: usize,
    /// `-1` when the stratum has no ground truth.
    pub ap: f64,
    pub max_recall: f64,
    pub precision: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CategoryReport {
    pub name: String,
    pub ap: f64,
    pub ap_s: f64,
    pub ap_m: f64,
    pub ap_l: f64,
    pub ap_per_threshold: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThresholdAp {
    pub iou_threshold: f64,
    pub ap: f64,
}

/// Evaluation summary. Empty strata report `-1`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub ap: f64,
    pub ap_s: f64,
    pub ap_m: f64,
    pub ap_l: f64,
    pub ap_per_threshold: Vec<ThresholdAp>,
    pub per_category: BTreeMap<u64, CategoryReport>,
    pub recall_grid: Vec<f64>,
    pub pr_curves: Vec<PrCurve>,
    pub config: EvalConfig,
}

impl EvalReport {
    pub fn band_ap(&self, band: SizeBand) -> f64 {
        match band {
            SizeBand::All => self.ap,
            SizeBand::Small => self.ap_s,
            SizeBand::Medium => self.ap_m,
            SizeBand::Large => self.ap_l,
        }
    }

    pub fn curve(&self, category_id: u64, iou_threshold: f64, band: SizeBand) -> Option<&PrCurve> {
        self.pr_curves.iter().find(|c| {
            c.category_id == category_id && c.iou_threshold == iou_threshold && c.band == band
        })
    }
}

/// Ranked outcomes of one image/category for every band and threshold.
struct PairEval {
    /// `num_gt[band]`
    num_gt: [usize; 4],
    /// `ranked[band][threshold]`: (score, is_tp) of non-ignored detections
    ranked: [Vec<Vec<(f64, bool)>>; 4],
}

fn eval_pair(gts: &[&Annotation], dets: &[&Detection], cfg: &EvalConfig) -> PairEval {
    let mut sorted: Vec<&Detection> = dets.to_vec();
    // stable: equal scores keep input order
    sorted.sort_by(|a, b| b.score.unwrap_or(0.0).total_cmp(&a.score.unwrap_or(0.0)));
    sorted.truncate(cfg.max_dets);
    let overlaps = overlap_matrix(&sorted, gts);
    let crowd: Vec<bool> = gts.iter().map(|g| g.iscrowd).collect();
    let gt_areas: Vec<f64> = gts.iter().map(|g| cfg.area_source.of(g)).collect();
    let det_areas: Vec<f64> = sorted.iter().map(|d| d.bbox.area()).collect();
    let scores: Vec<f64> = sorted.iter().map(|d| d.score.unwrap_or(0.0)).collect();

    let mut num_gt = [0usize; 4];
    let mut ranked: [Vec<Vec<(f64, bool)>>; 4] = Default::default();
    for (bi, band) in SizeBand::ALL.iter().enumerate() {
        let range = band.range(&cfg.size_thresholds);
        let problem = MatchProblem::new(&overlaps, &crowd, &gt_areas, &det_areas, Some(range));
        num_gt[bi] = problem.gt_ignore.iter().filter(|ig| !**ig).count();
        ranked[bi] = cfg
            .iou_thresholds
            .iter()
            .map(|&t| {
                problem
                    .solve(t)
                    .into_iter()
                    .zip(&scores)
                    .filter(|((_, ignored), _)| !ignored)
                    .map(|((m, _), &s)| (s, m.is_some()))
                    .collect()
            })
            .collect();
    }
    PairEval { num_gt, ranked }
}

fn mean_valid(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values
        .into_iter()
        .filter(|v| *v >= 0.0)
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        -1.0
    } else {
        sum / n as f64
    }
}

/// GT count and sampled curve of one (category, band, threshold) stratum.
type BandCurve = (usize, Option<SampledCurve>);

/// Scores `dets` against `gt`.
///
/// All detections must carry scores. Detections of categories absent from
/// the ground truth do not take part.
pub fn evaluate(
    gt: &AnnotatedDataset,
    dets: &DetectionSet,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    cfg.validate()?;
    dets.validate_against(gt)?;
    dets.require_scores()?;

    let mut image_ids: Vec<u64> = gt.images.iter().map(|i| i.image_id).collect();
    image_ids.sort_unstable();
    let cat_ids = gt.category_ids();

    let mut gt_groups: HashMap<(u64, u64), Vec<&Annotation>> = HashMap::new();
    for a in &gt.annotations {
        gt_groups
            .entry((a.image_id, a.category_id))
            .or_default()
            .push(a);
    }
    let mut det_groups: HashMap<(u64, u64), Vec<&Detection>> = HashMap::new();
    for d in &dets.detections {
        det_groups
            .entry((d.image_id, d.category_id))
            .or_default()
            .push(d);
    }

    let grid = recall_grid(cfg.recall_samples);
    let n_t = cfg.iou_thresholds.len();
    let empty_g: Vec<&Annotation> = Vec::new();
    let empty_d: Vec<&Detection> = Vec::new();

    // curves[k][band][t]
    let curves: Vec<Vec<Vec<BandCurve>>> = cat_ids
        .par_iter()
        .map(|&cat| {
            let pairs: Vec<PairEval> = image_ids
                .iter()
                .filter_map(|&img| {
                    let g = gt_groups.get(&(img, cat)).unwrap_or(&empty_g);
                    let d = det_groups.get(&(img, cat)).unwrap_or(&empty_d);
                    (!g.is_empty() || !d.is_empty()).then(|| eval_pair(g, d, cfg))
                })
                .collect();
            (0..4)
                .map(|bi| {
                    let num_gt: usize = pairs.iter().map(|p| p.num_gt[bi]).sum();
                    (0..n_t)
                        .map(|ti| {
                            let mut all: Vec<(f64, bool)> = pairs
                                .iter()
                                .flat_map(|p| p.ranked[bi][ti].iter().copied())
                                .collect();
                            all.sort_by(|a, b| b.0.total_cmp(&a.0));
                            let flags: Vec<bool> = all.into_iter().map(|(_, tp)| tp).collect();
                            (num_gt, sampled_curve(&flags, num_gt, &grid))
                        })
                        .collect()
                })
                .collect()
        })
        .collect();

    let ap_of = |k: usize, bi: usize, ti: usize| -> f64 {
        curves[k][bi][ti].1.as_ref().map_or(-1.0, |c| c.average())
    };
    let band_mean = |bi: usize| -> (f64, Vec<f64>) {
        let per_t: Vec<f64> = (0..n_t)
            .map(|ti| mean_valid((0..cat_ids.len()).map(|k| ap_of(k, bi, ti))))
            .collect();
        (mean_valid(per_t.iter().copied()), per_t)
    };
    let (ap, per_t_all) = band_mean(0);
    let names: HashMap<u64, &str> = gt
        .categories
        .iter()
        .map(|c| (c.id, c.name.as_str()))
        .collect();

    let mut per_category = BTreeMap::new();
    let mut pr_curves = Vec::new();
    for (k, &cat) in cat_ids.iter().enumerate() {
        let band_ap = |bi: usize| mean_valid((0..n_t).map(|ti| ap_of(k, bi, ti)));
        per_category.insert(
            cat,
            CategoryReport {
                name: names.get(&cat).unwrap_or(&"").to_string(),
                ap: band_ap(0),
                ap_s: band_ap(1),
                ap_m: band_ap(2),
                ap_l: band_ap(3),
                ap_per_threshold: (0..n_t).map(|ti| ap_of(k, 0, ti)).collect(),
            },
        );
        for (bi, band) in SizeBand::ALL.iter().enumerate() {
            for (ti, &t) in cfg.iou_thresholds.iter().enumerate() {
                let (num_gt, curve) = &curves[k][bi][ti];
                pr_curves.push(PrCurve {
                    category_id: cat,
                    iou_threshold: t,
                    band: *band,
                    num_gt: *num_gt,
                    ap: curve.as_ref().map_or(-1.0, |c| c.average()),
                    max_recall: curve.as_ref().map_or(-1.0, |c| c.max_recall),
                    precision: curve
                        .as_ref()
                        .map_or_else(|| vec![-1.0; grid.len()], |c| c.precision.clone()),
                });
            }
        }
    }

    Ok(EvalReport {
        ap,
        ap_s: band_mean(1).0,
        ap_m: band_mean(2).0,
        ap_l: band_mean(3).0,
        ap_per_threshold: cfg
            .iou_thresholds
            .iter()
            .zip(per_t_all)
            .map(|(&iou_threshold, ap)| ThresholdAp { iou_threshold, ap })
            .collect(),
        per_category,
        recall_grid: grid,
        pr_curves,
        config: cfg.clone(),
    })
}

/// Precision/recall of an unscored box set, e.g. a human annotator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FixedSetPoint {
    pub iou_threshold: f64,
    pub band: SizeBand,
    /// `-1` when no detection was counted.
    pub precision: f64,
    /// `-1` when the band holds no ground truth.
    pub recall: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub ignored: usize,
    pub num_gt: usize,
}

/// Scores a fixed set of boxes at one IoU threshold.
///
/// With no scores to rank by, detections of each image and category are
/// visited in descending order of their best overlap with any ground truth.
pub fn fixed_set_pr(
    gt: &AnnotatedDataset,
    dets: &DetectionSet,
    iou_t: f64,
    band: SizeBand,
    size_thresholds: &SizeThresholds,
    area_source: AreaSource,
) -> Result<FixedSetPoint> {
    if !(iou_t > 0.0 && iou_t <= 1.0) {
        return Err(Error::invalid(format!(
            "IoU threshold {iou_t} outside (0, 1]"
        )));
    }
    dets.validate_against(gt)?;
    let range = band.range(size_thresholds);
    let mut gt_groups: BTreeMap<(u64, u64), Vec<&Annotation>> = BTreeMap::new();
    for a in &gt.annotations {
        gt_groups
            .entry((a.image_id, a.category_id))
            .or_default()
            .push(a);
    }
    let mut det_groups: BTreeMap<(u64, u64), Vec<&Detection>> = BTreeMap::new();
    for d in &dets.detections {
        det_groups
            .entry((d.image_id, d.category_id))
            .or_default()
            .push(d);
    }
    let mut keys: Vec<(u64, u64)> = gt_groups.keys().chain(det_groups.keys()).copied().collect();
    keys.sort_unstable();
    keys.dedup();

    let mut point = FixedSetPoint {
        iou_threshold: iou_t,
        band,
        precision: -1.0,
        recall: -1.0,
        true_positives: 0,
        false_positives: 0,
        ignored: 0,
        num_gt: 0,
    };
    for key in keys {
        let g = gt_groups.get(&key).cloned().unwrap_or_default();
        let mut d = det_groups.get(&key).cloned().unwrap_or_default();
        let best = |det: &Detection| {
            g.iter()
                .map(|a| match_overlap(&det.bbox, &a.bbox, a.iscrowd))
                .fold(0.0, f64::max)
        };
        let mut keyed: Vec<(f64, &Detection)> = d.iter().map(|x| (best(x), *x)).collect();
        keyed.sort_by(|a, b| b.0.total_cmp(&a.0));
        d = keyed.into_iter().map(|(_, x)| x).collect();
        let m = match_image(&g, &d, iou_t, Some(range), area_source)?;
        point.true_positives += m.true_positives();
        point.false_positives += m.false_positives();
        point.ignored += m
            .detections
            .iter()
            .filter(|o| **o == DetOutcome::Ignored)
            .count();
        point.num_gt += m.counted_ground_truth();
    }
    let counted = point.true_positives + point.false_positives;
    if counted > 0 {
        point.precision = point.true_positives as f64 / counted as f64;
    }
    if point.num_gt > 0 {
        point.recall = point.true_positives as f64 / point.num_gt as f64;
    }
    Ok(point)
}
