//! C ABI over the scaledet toolkit.
//!
//! Every fallible function returns a [`ScaledetStatus`]; on failure the
//! message can be fetched with [`scaledet_last_error_message`] from the same
//! thread. Objects are handed out as opaque pointers and must be released
//! with the matching `*_free` function.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use scaledet::cocodata::{
    load_dataset, load_detections, parse_dataset, parse_detections, size_histogram,
    AnnotatedDataset, DetectionSet,
};
use scaledet::eval::{evaluate, fixed_set_pr, AreaSource, EvalConfig, EvalReport, SizeBand};
use scaledet::geometry::{self, BBox, SizeClass, SizeThresholds};
use scaledet::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScaledetStatus {
    Ok = 0,
    InvalidArgument = 1,
    Parse = 2,
    Referential = 3,
    Io = 4,
    ImageFormat = 5,
    MissingScore = 6,
    CacheMiss = 7,
    Adapter = 8,
    Serialize = 9,
    NullPointer = 10,
    Panic = 11,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScaledetSizeClass {
    Small = 0,
    Medium = 1,
    Large = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScaledetBand {
    All = 0,
    Small = 1,
    Medium = 2,
    Large = 3,
}

/// Axis-aligned box in `[x, y, w, h]` form.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaledetBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ScaledetSizeCounts {
    pub small: u64,
    pub medium: u64,
    pub large: u64,
    pub iscrowd: u64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ScaledetApSummary {
    pub ap: f64,
    pub ap_s: f64,
    pub ap_m: f64,
    pub ap_l: f64,
}

/// Precision/recall of an unscored set; `-1` marks undefined values.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ScaledetFixedPr {
    pub precision: f64,
    pub recall: f64,
    pub true_positives: u64,
    pub false_positives: u64,
    pub ignored: u64,
    pub num_gt: u64,
}

/// Opaque annotated dataset.
pub struct ScaledetDataset(AnnotatedDataset);

/// Opaque detection set.
pub struct ScaledetDetections(DetectionSet);

/// Opaque evaluation report.
pub struct ScaledetEvalReport(EvalReport);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> ScaledetStatus {
    match e {
        Error::InvalidArgument(_) => ScaledetStatus::InvalidArgument,
        Error::Parse { .. } => ScaledetStatus::Parse,
        Error::Referential { .. } => ScaledetStatus::Referential,
        Error::Io { .. } => ScaledetStatus::Io,
        Error::ImageFormat { .. } => ScaledetStatus::ImageFormat,
        Error::MissingScore { .. } => ScaledetStatus::MissingScore,
        Error::CacheMiss { .. } => ScaledetStatus::CacheMiss,
        Error::Adapter { .. } => ScaledetStatus::Adapter,
        Error::Serialize(_) => ScaledetStatus::Serialize,
    }
}

struct Fail(ScaledetStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(ScaledetStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, translating errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> ScaledetStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ScaledetStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(_) => {
            set_last_error("internal panic".to_string());
            ScaledetStatus::Panic
        }
    }
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a Path, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(ScaledetStatus::InvalidArgument, "path is not UTF-8".into()))?;
    Ok(Path::new(s))
}

unsafe fn bytes_arg<'a>(p: *const u8, len: usize) -> Result<&'a [u8], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null("buffer"));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_arg<'a, T>(p: *mut T) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null("output pointer"))
}

unsafe fn in_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

fn to_bbox(b: ScaledetBox) -> Result<BBox, Fail> {
    Ok(BBox::new(b.x, b.y, b.w, b.h)?)
}

fn from_bbox(b: &BBox) -> ScaledetBox {
    ScaledetBox {
        x: b.x(),
        y: b.y(),
        w: b.w(),
        h: b.h(),
    }
}

fn thresholds(small_max: f64, medium_max: f64) -> Result<SizeThresholds, Fail> {
    Ok(SizeThresholds::new(small_max, medium_max)?)
}

/// Message of the most recent failure on this thread, or null.
///
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn scaledet_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn scaledet_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library.
#[no_mangle]
pub unsafe extern "C" fn scaledet_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

// ---------------------------------------------------------------------------
// Datasets

#[no_mangle]
pub unsafe extern "C" fn scaledet_dataset_load(
    path: *const c_char,
    out: *mut *mut ScaledetDataset,
) -> ScaledetStatus {
    guard(|| {
        let out = out_arg(out)?;
        let d = load_dataset(path_arg(path)?)?;
        *out = Box::into_raw(Box::new(ScaledetDataset(d)));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn scaledet_dataset_from_json(
    data: *const u8,
    len: usize,
    out: *mut *mut ScaledetDataset,
) -> ScaledetStatus {
    guard(|| {
        let out = out_arg(out)?;
        let d = parse_dataset(bytes_arg(data, len)?, Path::new("<memory>"))?;
        *out = Box::into_raw(Box::new(ScaledetDataset(d)));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn scaledet_dataset_free(d: *mut ScaledetDataset) {
    if !d.is_null() {
        drop(Box::from_raw(d));
    }
}

/// Number of images; 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn scaledet_dataset_num_images(d: *const ScaledetDataset) -> usize {
    d.as_ref().map_or(0, |d| d.0.images.len())
}

/// Number of annotations; 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn scaledet_dataset_num_annotations(d: *const ScaledetDataset) -> usize {
    d.as_ref().map_or(0, |d| d.0.annotations.len())
}

/// Number of categories; 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn scaledet_dataset_num_categories(d: *const ScaledetDataset) -> usize {
    d.as_ref().map_or(0, |d| d.0.categories.len())
}

/// Size-class tallies of the non-crowd annotations plus the crowd count.
#[no_mangle]
pub unsafe extern "C" fn scaledet_dataset_size_histogram(
    d: *const ScaledetDataset,
    small_max: f64,
    medium_max: f64,
    out: *mut ScaledetSizeCounts,
) -> ScaledetStatus {
    guard(|| {
        let d = in_arg(d, "dataset")?;
        let out = out_arg(out)?;
        let h = size_histogram(&d.0, &thresholds(small_max, medium_max)?);
        *out = ScaledetSizeCounts {
            small: h.global.small as u64,
            medium: h.global.medium as u64,
            large: h.global.large as u64,
            iscrowd: h.iscrowd as u64,
        };
        Ok(())
    })
}

// ---------------------------------------------------------------------------
// Detections

#[no_mangle]
pub unsafe extern "C" fn scaledet_detections_load(
    path: *const c_char,
    out: *mut *mut ScaledetDetections,
) -> ScaledetStatus {
    guard(|| {
        let out = out_arg(out)?;
        let s = load_detections(path_arg(path)?)?;
        *out = Box::into_raw(Box::new(ScaledetDetections(s)));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn scaledet_detections_from_json(
    data: *const u8,
    len: usize,
    out: *mut *mut ScaledetDetections,
) -> ScaledetStatus {
    guard(|| {
        let out = out_arg(out)?;
        let s = parse_detections(bytes_arg(data, len)?, Path::new("<memory>"))?;
        *out = Box::into_raw(Box::new(ScaledetDetections(s)));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn scaledet_detections_free(s: *mut ScaledetDetections) {
    if !s.is_null() {
        drop(Box::from_raw(s));
    }
}

/// Number of detections; 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn scaledet_detections_len(s: *const ScaledetDetections) -> usize {
    s.as_ref().map_or(0, |s| s.0.len())
}

// ---------------------------------------------------------------------------
// Evaluation

/// COCO-style evaluation with the default configuration
/// (IoU 0.50:0.05:0.95, 100 detections, 101 recall samples).
#[no_mangle]
pub unsafe extern "C" fn scaledet_evaluate(
    gt: *const ScaledetDataset,
    dets: *const ScaledetDetections,
    out: *mut *mut ScaledetEvalReport,
) -> ScaledetStatus {
    guard(|| {
        let gt = in_arg(gt, "dataset")?;
        let dets = in_arg(dets, "detections")?;
        let out = out_arg(out)?;
        let r = evaluate(&gt.0, &dets.0, &EvalConfig::default())?;
        *out = Box::into_raw(Box::new(ScaledetEvalReport(r)));
        Ok(())
    })
}

/// Headline AP values; `-1` marks strata without ground truth.
#[no_mangle]
pub unsafe extern "C" fn scaledet_eval_report_summary(
    r: *const ScaledetEvalReport,
    out: *mut ScaledetApSummary,
) -> ScaledetStatus {
    guard(|| {
        let r = in_arg(r, "report")?;
        let out = out_arg(out)?;
        *out = ScaledetApSummary {
            ap: r.0.ap,
            ap_s: r.0.ap_s,
            ap_m: r.0.ap_m,
            ap_l: r.0.ap_l,
        };
        Ok(())
    })
}

/// Full report as JSON; release with [`scaledet_string_free`].
#[no_mangle]
pub unsafe extern "C" fn scaledet_eval_report_to_json(
    r: *const ScaledetEvalReport,
    out: *mut *mut c_char,
) -> ScaledetStatus {
    guard(|| {
        let r = in_arg(r, "report")?;
        let out = out_arg(out)?;
        let s = serde_json::to_string(&r.0)
            .map_err(|e| Fail(ScaledetStatus::Serialize, e.to_string()))?;
        let c = CString::new(s).map_err(|e| Fail(ScaledetStatus::Serialize, e.to_string()))?;
        *out = c.into_raw();
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn scaledet_eval_report_free(r: *mut ScaledetEvalReport) {
    if !r.is_null() {
        drop(Box::from_raw(r));
    }
}

/// Precision and recall of an unscored box set at one IoU threshold, with
/// bands defined by the default size thresholds.
#[no_mangle]
pub unsafe extern "C" fn scaledet_fixed_set_pr(
    gt: *const ScaledetDataset,
    dets: *const ScaledetDetections,
    iou_threshold: f64,
    band: ScaledetBand,
    out: *mut ScaledetFixedPr,
) -> ScaledetStatus {
    guard(|| {
        let gt = in_arg(gt, "dataset")?;
        let dets = in_arg(dets, "detections")?;
        let out = out_arg(out)?;
        let band = match band {
            ScaledetBand::All => SizeBand::All,
            ScaledetBand::Small => SizeBand::Small,
            ScaledetBand::Medium => SizeBand::Medium,
            ScaledetBand::Large => SizeBand::Large,
        };
        let p = fixed_set_pr(
            &gt.0,
            &dets.0,
            iou_threshold,
            band,
            &SizeThresholds::default(),
            AreaSource::AnnotationArea,
        )?;
        *out = ScaledetFixedPr {
            precision: p.precision,
            recall: p.recall,
            true_positives: p.true_positives as u64,
            false_positives: p.false_positives as u64,
            ignored: p.ignored as u64,
            num_gt: p.num_gt as u64,
        };
        Ok(())
    })
}

// ---------------------------------------------------------------------------
// Geometry

#[no_mangle]
pub unsafe extern "C" fn scaledet_iou(
    a: ScaledetBox,
    b: ScaledetBox,
    out: *mut f64,
) -> ScaledetStatus {
    guard(|| {
        let out = out_arg(out)?;
        *out = geometry::iou(&to_bbox(a)?, &to_bbox(b)?);
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn scaledet_scale_box(
    b: ScaledetBox,
    factor: f64,
    out: *mut ScaledetBox,
) -> ScaledetStatus {
    guard(|| {
        let out = out_arg(out)?;
        *out = from_bbox(&geometry::scale_box(&to_bbox(b)?, factor)?);
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn scaledet_classify_size(
    area: f64,
    small_max: f64,
    medium_max: f64,
    out: *mut ScaledetSizeClass,
) -> ScaledetStatus {
    guard(|| {
        let out = out_arg(out)?;
        *out = match geometry::classify_size(area, &thresholds(small_max, medium_max)?)? {
            SizeClass::Small => ScaledetSizeClass::Small,
            SizeClass::Medium => ScaledetSizeClass::Medium,
            SizeClass::Large => ScaledetSizeClass::Large,
        };
        Ok(())
    })
}
