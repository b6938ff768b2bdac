//! Precision/recall accumulation and interpolated average precision.

use serde::Serialize;

/// Recall grid `0, 1/(n-1), ..., 1`.
pub fn recall_grid(samples: usize) -> Vec<f64> {
    let last = (samples - 1) as f64;
    (0..samples).map(|i| i as f64 / last).collect()
}

/// Interpolated precision sampled on a recall grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampledCurve {
    pub precision: Vec<f64>,
    pub max_recall: f64,
}

impl SampledCurve {
    pub fn average(&self) -> f64 {
        self.precision.iter().sum::<f64>() / self.precision.len() as f64
    }
}

/// Builds the interpolated PR curve of a ranked list.
///
/// `ranked` holds `is_true_positive` flags ordered by descending score, with
/// ignored detections already removed; `num_gt` counts the non-ignored
/// ground truth. Precision is made monotone (running max from the high-recall
/// end) and read at the first point whose recall reaches each grid value;
/// grid values beyond the final recall get zero. Returns `None` when
/// `num_gt == 0`.
pub fn sampled_curve(ranked: &[bool], num_gt: usize, grid: &[f64]) -> Option<SampledCurve> {
    if num_gt == 0 {
        return None;
    }
    let mut recall = Vec::with_capacity(ranked.len());
    let mut precision = Vec::with_capacity(ranked.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &hit in ranked {
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let mut sampled = vec![0.0; grid.len()];
    let mut idx = 0;
    for (slot, &r) in sampled.iter_mut().zip(grid) {
        while idx < recall.len() && recall[idx] < r {
            idx += 1;
        }
        if idx == recall.len() {
            break;
        }
        *slot = precision[idx];
    }
    Some(SampledCurve {
        precision: sampled,
        max_recall: recall.last().copied().unwrap_or(0.0),
    })
}

/// Average precision of a ranked list; `-1` when there is no ground truth.
pub fn average_precision(ranked: &[bool], num_gt: usize, recall_samples: usize) -> f64 {
    sampled_curve(ranked, num_gt, &recall_grid(recall_samples)).map_or(-1.0, |c| c.average())
}
