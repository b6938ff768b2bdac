//! COCO-shaped ground truth and detection results.
//!
//! Only the subset of the COCO schema the toolkit needs is modeled. Unknown
//! keys, segmentation polygons included, are accepted and dropped on load.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;
use crate::geometry::{BBox, SizeClass, SizeThresholds};

/// Slack allowed between an annotation box and its image bounds.
pub const BOUNDS_TOLERANCE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    #[serde(rename = "id")]
    pub image_id: u64,
    pub width: u32,
    pub height: u32,
    #[serde(default)]
    pub file_name: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub ann_id: u64,
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: BBox,
    pub area: f64,
    pub iscrowd: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub id: u64,
    pub name: String,
}

/// A predicted box. `score` is absent for fixed-set (unscored) results.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: BBox,
    pub score: Option<f64>,
    /// Which inference pass produced the box, when known (1 native, 2 upscaled).
    pub pass: Option<u8>,
}

impl Detection {
    pub fn new(image_id: u64, category_id: u64, bbox: BBox, score: Option<f64>) -> Result<Self> {
        if let Some(s) = score {
            check_score(s)?;
        }
        Ok(Detection {
            image_id,
            category_id,
            bbox,
            score,
            pass: None,
        })
    }

    /// The score, or a typed error for unscored detections.
    pub fn require_score(&self) -> Result<f64> {
        self.score.ok_or(Error::MissingScore {
            image_id: self.image_id,
        })
    }
}

pub(crate) fn check_score(s: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::invalid(format!("score {s} outside [0, 1]")));
    }
    Ok(())
}

/// Images, annotations and categories with resolved references.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AnnotatedDataset {
    pub images: Vec<ImageRecord>,
    pub annotations: Vec<Annotation>,
    pub categories: Vec<Category>,
}

impl AnnotatedDataset {
    /// Builds a dataset and checks its invariants.
    pub fn new(
        images: Vec<ImageRecord>,
        annotations: Vec<Annotation>,
        categories: Vec<Category>,
    ) -> Result<Self> {
        let d = AnnotatedDataset {
            images,
            annotations,
            categories,
        };
        d.validate()?;
        Ok(d)
    }

    /// Checks id uniqueness, reference resolution, areas and box bounds.
    pub fn validate(&self) -> Result<()> {
        let mut image_dims = HashMap::with_capacity(self.images.len());
        let mut dup_images = Vec::new();
        for img in &self.images {
            if img.width == 0 || img.height == 0 {
                return Err(Error::invalid(format!(
                    "image {} has zero width or height",
                    img.image_id
                )));
            }
            if image_dims
                .insert(img.image_id, (img.width as f64, img.height as f64))
                .is_some()
            {
                dup_images.push(img.image_id);
            }
        }
        if !dup_images.is_empty() {
            return Err(Error::Referential {
                message: "duplicate image ids".into(),
                ids: dup_images,
            });
        }
        let cats: BTreeSet<u64> = self.categories.iter().map(|c| c.id).collect();
        if cats.len() != self.categories.len() {
            return Err(Error::Referential {
                message: "duplicate category ids".into(),
                ids: self.categories.iter().map(|c| c.id).collect(),
            });
        }

        let mut seen = BTreeSet::new();
        let mut dup_anns = Vec::new();
        let mut dangling = Vec::new();
        let mut out_of_bounds = Vec::new();
        for a in &self.annotations {
            if !seen.insert(a.ann_id) {
                dup_anns.push(a.ann_id);
            }
            if !(a.area > 0.0 && a.area.is_finite()) {
                return Err(Error::invalid(format!(
                    "annotation {} has non-positive area {}",
                    a.ann_id, a.area
                )));
            }
            match image_dims.get(&a.image_id) {
                Some(&(w, h)) if cats.contains(&a.category_id) => {
                    let t = BOUNDS_TOLERANCE + 1e-9;
                    if a.bbox.x() < -t
                        || a.bbox.y() < -t
                        || a.bbox.x2() > w + t
                        || a.bbox.y2() > h + t
                    {
                        out_of_bounds.push(a.ann_id);
                    }
                }
                _ => dangling.push(a.ann_id),
            }
        }
        if !dup_anns.is_empty() {
            return Err(Error::Referential {
                message: "duplicate annotation ids".into(),
                ids: dup_anns,
            });
        }
        if !dangling.is_empty() {
            return Err(Error::Referential {
                message: "annotations reference unknown image_id or category_id".into(),
                ids: dangling,
            });
        }
        if !out_of_bounds.is_empty() {
            return Err(Error::Referential {
                message: "annotation boxes extend beyond their image bounds".into(),
                ids: out_of_bounds,
            });
        }
        Ok(())
    }

    pub fn image(&self, image_id: u64) -> Option<&ImageRecord> {
        self.images.iter().find(|i| i.image_id == image_id)
    }

    /// Image records keyed by id.
    pub fn image_index(&self) -> HashMap<u64, &ImageRecord> {
        self.images.iter().map(|i| (i.image_id, i)).collect()
    }

    /// Annotations grouped by image id, preserving file order within each image.
    pub fn annotations_by_image(&self) -> HashMap<u64, Vec<&Annotation>> {
        let mut out: HashMap<u64, Vec<&Annotation>> = HashMap::new();
        for a in &self.annotations {
            out.entry(a.image_id).or_default().push(a);
        }
        out
    }

    pub fn max_image_id(&self) -> u64 {
        self.images.iter().map(|i| i.image_id).max().unwrap_or(0)
    }

    pub fn max_ann_id(&self) -> u64 {
        self.annotations.iter().map(|a| a.ann_id).max().unwrap_or(0)
    }

    pub fn category_ids(&self) -> Vec<u64> {
        let mut ids: Vec<u64> = self.categories.iter().map(|c| c.id).collect();
        ids.sort_unstable();
        ids
    }
}

/// Predicted boxes for a set of images.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DetectionSet {
    pub detections: Vec<Detection>,
}

impl DetectionSet {
    pub fn new(detections: Vec<Detection>) -> Self {
        DetectionSet { detections }
    }

    pub fn len(&self) -> usize {
        self.detections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.detections.is_empty()
    }

    /// Detections grouped by image id, preserving order.
    pub fn by_image(&self) -> BTreeMap<u64, Vec<&Detection>> {
        let mut out: BTreeMap<u64, Vec<&Detection>> = BTreeMap::new();
        for d in &self.detections {
            out.entry(d.image_id).or_default().push(d);
        }
        out
    }

    /// Checks that every detection refers to an image of `gt`.
    pub fn validate_against(&self, gt: &AnnotatedDataset) -> Result<()> {
        let ids: BTreeSet<u64> = gt.images.iter().map(|i| i.image_id).collect();
        let unknown: BTreeSet<u64> = self
            .detections
            .iter()
            .map(|d| d.image_id)
            .filter(|id| !ids.contains(id))
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::Referential {
                message: "detections reference image ids absent from the dataset".into(),
                ids: unknown.into_iter().collect(),
            })
        }
    }

    /// Fails on the first unscored detection.
    pub fn require_scores(&self) -> Result<()> {
        for d in &self.detections {
            d.require_score()?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Wire format

fn crowd_flag<'de, D: Deserializer<'de>>(de: D) -> std::result::Result<bool, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Flag {
        Int(i64),
        Bool(bool),
    }
    match Flag::deserialize(de)? {
        Flag::Int(0) | Flag::Bool(false) => Ok(false),
        Flag::Int(1) | Flag::Bool(true) => Ok(true),
        Flag::Int(v) => Err(serde::de::Error::custom(format!(
            "iscrowd must be 0 or 1, got {v}"
        ))),
    }
}

#[derive(Serialize, Deserialize)]
struct WireAnnotation {
    id: u64,
    image_id: u64,
    category_id: u64,
    bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    area: Option<f64>,
    #[serde(default, deserialize_with = "crowd_flag", serialize_with = "ser_crowd")]
    iscrowd: bool,
}

fn ser_crowd<S: serde::Serializer>(v: &bool, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_u8(u8::from(*v))
}

#[derive(Serialize, Deserialize)]
struct WireDataset {
    images: Vec<ImageRecord>,
    annotations: Vec<WireAnnotation>,
    categories: Vec<Category>,
}

/// One record of the COCO results format. `pass` and `scale_tag` are
/// extensions that readers unaware of them skip.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct WireDetection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_id: Option<u64>,
    pub category_id: u64,
    pub bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pass: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale_tag: Option<String>,
}

impl WireDetection {
    pub(crate) fn from_detection(d: &Detection) -> Self {
        WireDetection {
            image_id: Some(d.image_id),
            category_id: d.category_id,
            bbox: d.bbox.to_array(),
            score: d.score,
            pass: d.pass,
            scale_tag: None,
        }
    }

    /// Validates and converts; `default_image` fills a missing `image_id`.
    pub(crate) fn into_detection(self, default_image: Option<u64>) -> Result<Detection> {
        let image_id = self
            .image_id
            .or(default_image)
            .ok_or_else(|| Error::invalid("detection record without image_id"))?;
        let bbox = BBox::try_from(self.bbox)?;
        let mut d = Detection::new(image_id, self.category_id, bbox, self.score)?;
        d.pass = self.pass;
        Ok(d)
    }
}

impl From<&Annotation> for WireAnnotation {
    fn from(a: &Annotation) -> Self {
        WireAnnotation {
            id: a.ann_id,
            image_id: a.image_id,
            category_id: a.category_id,
            bbox: a.bbox.to_array(),
            area: Some(a.area),
            iscrowd: a.iscrowd,
        }
    }
}

/// Parses a COCO ground-truth document held in memory.
pub fn parse_dataset(text: &[u8], origin: &Path) -> Result<AnnotatedDataset> {
    let wire: WireDataset =
        serde_json::from_slice(text).map_err(|e| fsutil::json_error(origin, text, e))?;
    let mut annotations = Vec::with_capacity(wire.annotations.len());
    for a in wire.annotations {
        let bbox = BBox::try_from(a.bbox)
            .map_err(|e| Error::invalid(format!("annotation {}: {e}", a.id)))?;
        annotations.push(Annotation {
            ann_id: a.id,
            image_id: a.image_id,
            category_id: a.category_id,
            area: a.area.unwrap_or_else(|| bbox.area()),
            bbox,
            iscrowd: a.iscrowd,
        });
    }
    AnnotatedDataset::new(wire.images, annotations, wire.categories)
}

pub fn dataset_to_json(d: &AnnotatedDataset) -> Result<Vec<u8>> {
    let wire = WireDataset {
        images: d.images.clone(),
        annotations: d.annotations.iter().map(WireAnnotation::from).collect(),
        categories: d.categories.clone(),
    };
    serde_json::to_vec(&wire).map_err(|e| Error::Serialize(e.to_string()))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<AnnotatedDataset> {
    let path = path.as_ref();
    parse_dataset(&fsutil::read(path)?, path)
}

pub fn save_dataset(d: &AnnotatedDataset, path: impl AsRef<Path>) -> Result<()> {
    fsutil::write_atomic(path.as_ref(), &dataset_to_json(d)?)
}

pub fn parse_detections(text: &[u8], origin: &Path) -> Result<DetectionSet> {
    let wire: Vec<WireDetection> =
        serde_json::from_slice(text).map_err(|e| fsutil::json_error(origin, text, e))?;
    let detections = wire
        .into_iter()
        .map(|w| w.into_detection(None))
        .collect::<Result<Vec<_>>>()?;
    Ok(DetectionSet { detections })
}

pub fn detections_to_json(set: &DetectionSet) -> Result<Vec<u8>> {
    let wire: Vec<WireDetection> = set
        .detections
        .iter()
        .map(WireDetection::from_detection)
        .collect();
    serde_json::to_vec(&wire).map_err(|e| Error::Serialize(e.to_string()))
}

pub fn load_detections(path: impl AsRef<Path>) -> Result<DetectionSet> {
    let path = path.as_ref();
    parse_detections(&fsutil::read(path)?, path)
}

pub fn save_detections(set: &DetectionSet, path: impl AsRef<Path>) -> Result<()> {
    fsutil::write_atomic(path.as_ref(), &detections_to_json(set)?)
}

// ---------------------------------------------------------------------------
// Statistics

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct SizeCounts {
    pub small: usize,
    pub medium: usize,
    pub large: usize,
}

impl SizeCounts {
    pub fn add(&mut self, class: SizeClass) {
        match class {
            SizeClass::Small => self.small += 1,
            SizeClass::Medium => self.medium += 1,
            SizeClass::Large => self.large += 1,
        }
    }

    pub fn get(&self, class: SizeClass) -> usize {
        match class {
            SizeClass::Small => self.small,
            SizeClass::Medium => self.medium,
            SizeClass::Large => self.large,
        }
    }

    pub fn total(&self) -> usize {
        self.small + self.medium + self.large
    }

    /// Fraction of small instances, `None` when there are no instances.
    pub fn small_fraction(&self) -> Option<f64> {
        let n = self.total();
        (n > 0).then(|| self.small as f64 / n as f64)
    }
}

/// Size-class tallies of the non-crowd annotations, with crowd counts kept apart.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SizeHistogram {
    pub global: SizeCounts,
    pub per_category: BTreeMap<u64, SizeCounts>,
    pub iscrowd: usize,
    pub iscrowd_per_category: BTreeMap<u64, usize>,
}

/// Counts annotations per size class, globally and per category.
///
/// Classification uses the annotation `area` field.
pub fn size_histogram(d: &AnnotatedDataset, t: &SizeThresholds) -> SizeHistogram {
    let mut h = SizeHistogram::default();
    for c in &d.categories {
        h.per_category.insert(c.id, SizeCounts::default());
    }
    for a in &d.annotations {
        if a.iscrowd {
            h.iscrowd += 1;
            *h.iscrowd_per_category.entry(a.category_id).or_default() += 1;
            continue;
        }
        let class = t.class_of(a.area);
        h.global.add(class);
        h.per_category.entry(a.category_id).or_default().add(class);
    }
    h
}
