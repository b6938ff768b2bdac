//! Axis-aligned bounding boxes and COCO size bands.
//!
//! Boxes are stored in COCO `(x, y, w, h)` form with real-valued coordinates;
//! IoU and clipping go through corner form.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned rectangle in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x: f64,
    y: f64,
    w: f64,
    h: f64,
}

impl BBox {
    /// Builds a box, rejecting non-finite values and non-positive extents.
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        if !(x.is_finite() && y.is_finite() && w.is_finite() && h.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite box [{x}, {y}, {w}, {h}]"
            )));
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(Error::invalid(format!(
                "degenerate box [{x}, {y}, {w}, {h}]: width and height must be positive"
            )));
        }
        Ok(BBox { x, y, w, h })
    }

    /// Builds a box from corner coordinates `(x1, y1)`–`(x2, y2)`.
    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        BBox::new(x1, y1, x2 - x1, y2 - y1)
    }

    pub fn x(&self) -> f64 {
        self.x
    }

    pub fn y(&self) -> f64 {
        self.y
    }

    pub fn w(&self) -> f64 {
        self.w
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn x2(&self) -> f64 {
        self.x + self.w
    }

    pub fn y2(&self) -> f64 {
        self.y + self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }

    /// Area of the overlap with `other`, zero when disjoint.
    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let iw = self.x2().min(other.x2()) - self.x.max(other.x);
        let ih = self.y2().min(other.y2()) - self.y.max(other.y);
        if iw <= 0.0 || ih <= 0.0 {
            0.0
        } else {
            iw * ih
        }
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

/// Intersection over union of two boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Multiplies every field of the box by `factor`.
pub fn scale_box(b: &BBox, factor: f64) -> Result<BBox> {
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(Error::invalid(format!(
            "scale factor must be positive, got {factor}"
        )));
    }
    BBox::new(b.x * factor, b.y * factor, b.w * factor, b.h * factor)
}

/// Intersection of the box with `[0, width] x [0, height]`; `None` when empty.
pub fn clip_box(b: &BBox, width: f64, height: f64) -> Option<BBox> {
    // Inside boxes pass through untouched so corner arithmetic adds no rounding.
    if b.x >= 0.0 && b.y >= 0.0 && b.x2() <= width && b.y2() <= height {
        return Some(*b);
    }
    let x1 = b.x.clamp(0.0, width);
    let y1 = b.y.clamp(0.0, height);
    let x2 = b.x2().clamp(0.0, width);
    let y2 = b.y2().clamp(0.0, height);
    BBox::from_corners(x1, y1, x2, y2).ok()
}

/// COCO size class of an instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeClass {
    Small,
    Medium,
    Large,
}

impl SizeClass {
    pub const ALL: [SizeClass; 3] = [SizeClass::Small, SizeClass::Medium, SizeClass::Large];

    pub fn name(&self) -> &'static str {
        match self {
            SizeClass::Small => "small",
            SizeClass::Medium => "medium",
            SizeClass::Large => "large",
        }
    }
}

impl std::fmt::Display for SizeClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Area boundaries between size classes, in square pixels.
///
/// Small is `[0, small_max)`, Medium `[small_max, medium_max)`, Large the rest.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SizeThresholds {
    small_max: f64,
    medium_max: f64,
}

impl SizeThresholds {
    pub const COCO_SMALL_MAX: f64 = 32.0 * 32.0;
    pub const COCO_MEDIUM_MAX: f64 = 96.0 * 96.0;

    pub fn new(small_max: f64, medium_max: f64) -> Result<Self> {
        if !(small_max > 0.0 && small_max < medium_max && medium_max.is_finite()) {
            return Err(Error::invalid(format!(
                "size thresholds need 0 < small_max < medium_max, got {small_max}, {medium_max}"
            )));
        }
        Ok(SizeThresholds {
            small_max,
            medium_max,
        })
    }

    pub fn small_max(&self) -> f64 {
        self.small_max
    }

    pub fn medium_max(&self) -> f64 {
        self.medium_max
    }

    /// Half-open area interval `[lo, hi)` covered by a class.
    pub fn range(&self, class: SizeClass) -> (f64, f64) {
        match class {
            SizeClass::Small => (0.0, self.small_max),
            SizeClass::Medium => (self.small_max, self.medium_max),
            SizeClass::Large => (self.medium_max, f64::INFINITY),
        }
    }

    /// Class of an area that is already known to be non-negative.
    pub fn class_of(&self, area: f64) -> SizeClass {
        if area < self.small_max {
            SizeClass::Small
        } else if area < self.medium_max {
            SizeClass::Medium
        } else {
            SizeClass::Large
        }
    }
}

impl Default for SizeThresholds {
    fn default() -> Self {
        SizeThresholds {
            small_max: Self::COCO_SMALL_MAX,
            medium_max: Self::COCO_MEDIUM_MAX,
        }
    }
}

/// Size class of an area under the given thresholds.
pub fn classify_size(area: f64, t: &SizeThresholds) -> Result<SizeClass> {
    if area.is_nan() || area < 0.0 {
        return Err(Error::invalid(format!(
            "area must be non-negative, got {area}"
        )));
    }
    Ok(t.class_of(area))
}
