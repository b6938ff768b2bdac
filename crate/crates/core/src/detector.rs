//! The detector boundary and its adapters.
//!
//! A [`Detector`] maps one presented image to scored boxes in that image's
//! coordinate frame. Three adapters are provided: replay of cached results,
//! an external process speaking JSON, and a ground-truth oracle with
//! size-dependent recall for desk-scale experiments.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::cocodata::{AnnotatedDataset, Annotation, Detection, ImageRecord, WireDetection};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::geometry::{clip_box, scale_box, BBox, SizeClass, SizeThresholds};
use crate::raster::{self, ImageBuffer};

/// Records the scaling applied to the presented image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleTag {
    factor: f64,
}

impl ScaleTag {
    pub const NATIVE: ScaleTag = ScaleTag { factor: 1.0 };

    pub fn new(factor: f64) -> Result<Self> {
        if !(factor > 0.0 && factor.is_finite()) {
            return Err(Error::invalid(format!(
                "scale factor must be positive, got {factor}"
            )));
        }
        Ok(ScaleTag { factor })
    }

    pub fn factor(&self) -> f64 {
        self.factor
    }

    /// Cache key form, e.g. `x1`, `x2.2`.
    pub fn label(&self) -> String {
        format!("x{}", self.factor)
    }

    pub fn parse(label: &str) -> Result<Self> {
        let v = label
            .strip_prefix('x')
            .and_then(|s| s.parse::<f64>().ok())
            .ok_or_else(|| Error::invalid(format!("malformed scale tag {label:?}")))?;
        ScaleTag::new(v)
    }
}

impl std::fmt::Display for ScaleTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "x{}", self.factor)
    }
}

#[derive(Debug, Clone)]
pub enum ImageSource {
    Buffer(ImageBuffer),
    Path(PathBuf),
}

/// One image presented to a detector.
///
/// For adapters that do not read pixels (see [`Detector::needs_pixels`]) the
/// source may be the native file while `scale_tag` says how it is presented.
#[derive(Debug, Clone)]
pub struct DetectRequest {
    pub image_id: u64,
    pub image: ImageSource,
    pub scale_tag: ScaleTag,
}

pub trait Detector: Send + Sync {
    fn detect(&self, req: &DetectRequest) -> Result<Vec<Detection>>;

    /// Whether the adapter looks at pixels. When false, callers may skip
    /// materializing rescaled buffers and send the native path instead.
    fn needs_pixels(&self) -> bool {
        true
    }
}

// ---------------------------------------------------------------------------
// Cached results

#[derive(Deserialize, Serialize)]
struct CacheEntry {
    image_id: u64,
    scale_tag: String,
    detections: Vec<WireDetection>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum CacheFile {
    Records(Vec<WireDetection>),
    Entries { entries: Vec<CacheEntry> },
}

/// Replays stored detections keyed by `(image_id, scale_tag)`.
///
/// Accepts either a results array whose records carry an optional
/// `scale_tag` (absent means `x1`), or `{"entries": [{image_id, scale_tag,
/// detections}]}`, which can also record images with no detections.
#[derive(Debug, Clone, Default)]
pub struct CachedDetector {
    entries: HashMap<(u64, String), Vec<Detection>>,
}

impl CachedDetector {
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fsutil::read(path)?;
        Self::from_slice(&bytes, path)
    }

    pub fn from_slice(bytes: &[u8], origin: &Path) -> Result<Self> {
        let file: CacheFile =
            serde_json::from_slice(bytes).map_err(|e| fsutil::json_error(origin, bytes, e))?;
        let mut entries: HashMap<(u64, String), Vec<Detection>> = HashMap::new();
        match file {
            CacheFile::Records(records) => {
                for r in records {
                    let tag = canonical_tag(r.scale_tag.as_deref())?;
                    let d = r.into_detection(None)?;
                    entries.entry((d.image_id, tag)).or_default().push(d);
                }
            }
            CacheFile::Entries { entries: list } => {
                for e in list {
                    let tag = canonical_tag(Some(&e.scale_tag))?;
                    let slot = entries.entry((e.image_id, tag)).or_default();
                    for r in e.detections {
                        let mut d = r.into_detection(Some(e.image_id))?;
                        d.image_id = e.image_id;
                        slot.push(d);
                    }
                }
            }
        }
        Ok(CachedDetector { entries })
    }

    pub fn insert(&mut self, image_id: u64, tag: ScaleTag, detections: Vec<Detection>) {
        self.entries.insert((image_id, tag.label()), detections);
    }

    /// Serializes in the `entries` form, sorted by key.
    pub fn to_json(&self) -> Result<Vec<u8>> {
        let mut keys: Vec<&(u64, String)> = self.entries.keys().collect();
        keys.sort_by(|a, b| {
            a.0.cmp(&b.0).then_with(|| {
                let fa = ScaleTag::parse(&a.1).map(|t| t.factor()).unwrap_or(0.0);
                let fb = ScaleTag::parse(&b.1).map(|t| t.factor()).unwrap_or(0.0);
                fa.total_cmp(&fb)
            })
        });
        let entries: Vec<CacheEntry> = keys
            .into_iter()
            .map(|k| CacheEntry {
                image_id: k.0,
                scale_tag: k.1.clone(),
                detections: self.entries[k]
                    .iter()
                    .map(WireDetection::from_detection)
                    .collect(),
            })
            .collect();
        serde_json::to_vec(&serde_json::json!({ "entries": entries }))
            .map_err(|e| Error::Serialize(e.to_string()))
    }
}

fn canonical_tag(tag: Option<&str>) -> Result<String> {
    Ok(match tag {
        None => ScaleTag::NATIVE.label(),
        Some(t) => ScaleTag::parse(t)?.label(),
    })
}

impl Detector for CachedDetector {
    fn detect(&self, req: &DetectRequest) -> Result<Vec<Detection>> {
        self.entries
            .get(&(req.image_id, req.scale_tag.label()))
            .cloned()
            .ok_or_else(|| Error::CacheMiss {
                image_id: req.image_id,
                scale_tag: req.scale_tag.label(),
            })
    }

    fn needs_pixels(&self) -> bool {
        false
    }
}

// ---------------------------------------------------------------------------
// External process

struct Semaphore {
    permits: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn new(n: usize) -> Self {
        Semaphore {
            permits: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> SemaphoreGuard<'_> {
        let mut p = self.permits.lock().unwrap();
        while *p == 0 {
            p = self.cv.wait(p).unwrap();
        }
        *p -= 1;
        SemaphoreGuard(self)
    }
}

struct SemaphoreGuard<'a>(&'a Semaphore);

impl Drop for SemaphoreGuard<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock().unwrap() += 1;
        self.0.cv.notify_one();
    }
}

struct BatchProcess {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<std::io::Result<String>>,
}

impl Drop for BatchProcess {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Runs an external command per image (or one long-lived process in batch mode).
///
/// Per-image protocol: `argv = [cmd..., image_path]`, stdout is a results JSON
/// array, exit status 0. Batch protocol: one JSON request line
/// `{"image_path": ..., "image_id": ...}` on stdin, one JSON array line back.
pub struct SubprocessDetector {
    argv: Vec<String>,
    timeout: Duration,
    batch: bool,
    permits: Semaphore,
    process: Mutex<Option<BatchProcess>>,
}

impl SubprocessDetector {
    pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(120);

    pub fn new(argv: Vec<String>) -> Result<Self> {
        if argv.is_empty() || argv[0].is_empty() {
            return Err(Error::invalid("subprocess adapter needs a command"));
        }
        let cap = std::thread::available_parallelism().map_or(1, |n| n.get());
        Ok(SubprocessDetector {
            argv,
            timeout: Self::DEFAULT_TIMEOUT,
            batch: false,
            permits: Semaphore::new(cap),
            process: Mutex::new(None),
        })
    }

    /// Splits a command template on whitespace.
    pub fn from_template(template: &str) -> Result<Self> {
        Self::new(template.split_whitespace().map(str::to_string).collect())
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn with_concurrency(mut self, cap: usize) -> Self {
        self.permits = Semaphore::new(cap);
        self
    }

    pub fn with_batch(mut self, batch: bool) -> Self {
        self.batch = batch;
        self
    }

    fn adapter_err(&self, image_id: u64, message: impl Into<String>) -> Error {
        Error::Adapter {
            image_id,
            message: message.into(),
        }
    }

    fn parse_output(&self, image_id: u64, stdout: &[u8]) -> Result<Vec<Detection>> {
        let records: Vec<WireDetection> = serde_json::from_slice(stdout)
            .map_err(|e| self.adapter_err(image_id, format!("malformed output: {e}")))?;
        records
            .into_iter()
            .map(|r| {
                let mut d = r
                    .into_detection(Some(image_id))
                    .map_err(|e| self.adapter_err(image_id, e.to_string()))?;
                d.image_id = image_id;
                Ok(d)
            })
            .collect()
    }

    fn run_once(&self, image_id: u64, path: &Path) -> Result<Vec<Detection>> {
        let mut child = Command::new(&self.argv[0])
            .args(&self.argv[1..])
            .arg(path)
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| {
                self.adapter_err(image_id, format!("cannot start {}: {e}", self.argv[0]))
            })?;
        let out = drain(child.stdout.take());
        let err = drain(child.stderr.take());
        let start = Instant::now();
        let status = loop {
            match child.try_wait() {
                Ok(Some(status)) => break status,
                Ok(None) if start.elapsed() >= self.timeout => {
                    let _ = child.kill();
                    let _ = child.wait();
                    return Err(
                        self.adapter_err(image_id, format!("timed out after {:?}", self.timeout))
                    );
                }
                Ok(None) => std::thread::sleep(Duration::from_millis(5)),
                Err(e) => return Err(self.adapter_err(image_id, e.to_string())),
            }
        };
        let stdout = out.join().unwrap_or_default();
        let stderr = err.join().unwrap_or_default();
        if !status.success() {
            return Err(self.adapter_err(
                image_id,
                format!(
                    "command exited with {status}; stderr: {}",
                    String::from_utf8_lossy(&stderr).trim()
                ),
            ));
        }
        self.parse_output(image_id, &stdout)
    }

    fn spawn_batch(&self, image_id: u64) -> Result<BatchProcess> {
        let mut child = Command::new(&self.argv[0])
            .args(&self.argv[1..])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| {
                self.adapter_err(image_id, format!("cannot start {}: {e}", self.argv[0]))
            })?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(BatchProcess {
            child,
            stdin,
            lines: rx,
        })
    }

    fn run_batch(&self, image_id: u64, path: &Path) -> Result<Vec<Detection>> {
        let mut guard = self.process.lock().unwrap();
        if guard.is_none() {
            *guard = Some(self.spawn_batch(image_id)?);
        }
        let proc = guard.as_mut().expect("batch process");
        let request = serde_json::json!({
            "image_path": path.to_string_lossy(),
            "image_id": image_id,
        });
        let sent = writeln!(proc.stdin, "{request}").and_then(|_| proc.stdin.flush());
        let reply = match sent {
            Ok(()) => proc.lines.recv_timeout(self.timeout),
            Err(e) => {
                *guard = None;
                return Err(self.adapter_err(image_id, format!("batch process closed stdin: {e}")));
            }
        };
        match reply {
            Ok(Ok(line)) => self.parse_output(image_id, line.as_bytes()),
            Ok(Err(e)) => {
                *guard = None;
                Err(self.adapter_err(image_id, e.to_string()))
            }
            Err(mpsc::RecvTimeoutError::Timeout) => {
                *guard = None;
                Err(self.adapter_err(image_id, format!("timed out after {:?}", self.timeout)))
            }
            Err(mpsc::RecvTimeoutError::Disconnected) => {
                *guard = None;
                Err(self.adapter_err(image_id, "batch process exited"))
            }
        }
    }
}

fn drain<R: Read + Send + 'static>(r: Option<R>) -> std::thread::JoinHandle<Vec<u8>> {
    std::thread::spawn(move || {
        let mut buf = Vec::new();
        if let Some(mut r) = r {
            let _ = r.read_to_end(&mut buf);
        }
        buf
    })
}

impl Detector for SubprocessDetector {
    fn detect(&self, req: &DetectRequest) -> Result<Vec<Detection>> {
        let _permit = self.permits.acquire();
        // a buffer is handed over as a temporary PPM that lives until the reply
        let tmp;
        let path: &Path = match &req.image {
            ImageSource::Path(p) => p,
            ImageSource::Buffer(buf) => {
                let mut f = tempfile::Builder::new()
                    .suffix(".ppm")
                    .tempfile()
                    .map_err(|e| Error::io(std::env::temp_dir(), e))?;
                f.write_all(&raster::encode_pnm(buf))
                    .map_err(|e| Error::io(f.path(), e))?;
                tmp = f;
                tmp.path()
            }
        };
        if self.batch {
            self.run_batch(req.image_id, path)
        } else {
            self.run_once(req.image_id, path)
        }
    }
}

// ---------------------------------------------------------------------------
// Ground-truth oracle

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecallCurve {
    pub small: f64,
    pub medium: f64,
    pub large: f64,
}

impl RecallCurve {
    pub fn get(&self, class: SizeClass) -> f64 {
        match class {
            SizeClass::Small => self.small,
            SizeClass::Medium => self.medium,
            SizeClass::Large => self.large,
        }
    }

    pub fn uniform(p: f64) -> Self {
        RecallCurve {
            small: p,
            medium: p,
            large: p,
        }
    }
}

impl Default for RecallCurve {
    fn default() -> Self {
        RecallCurve {
            small: 0.2,
            medium: 0.8,
            large: 0.9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    pub seed: u64,
    /// Detection probability keyed by the presented-resolution size class.
    pub recall_curve: RecallCurve,
    /// Used instead when a natively small box is presented as medium or large.
    pub upscaled_small_recall: f64,
    /// Corner noise standard deviation as a fraction of box width/height.
    pub localization_noise: f64,
    /// Expected false positives per image.
    pub false_positive_rate: f64,
    pub tp_score: (f64, f64),
    pub fp_score: (f64, f64),
    pub size_thresholds: SizeThresholds,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            seed: 0,
            recall_curve: RecallCurve::default(),
            upscaled_small_recall: 0.8,
            localization_noise: 0.05,
            false_positive_rate: 0.5,
            tp_score: (0.6, 1.0),
            fp_score: (0.1, 0.6),
            size_thresholds: SizeThresholds::default(),
        }
    }
}

impl OracleConfig {
    /// Perfect recall, no noise, no false positives.
    pub fn identity(seed: u64) -> Self {
        OracleConfig {
            seed,
            recall_curve: RecallCurve::uniform(1.0),
            upscaled_small_recall: 1.0,
            localization_noise: 0.0,
            false_positive_rate: 0.0,
            ..OracleConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            self.recall_curve.small,
            self.recall_curve.medium,
            self.recall_curve.large,
            self.upscaled_small_recall,
        ];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::invalid("oracle probabilities must lie in [0, 1]"));
        }
        if !(self.localization_noise >= 0.0 && self.localization_noise.is_finite()) {
            return Err(Error::invalid("localization noise must be non-negative"));
        }
        if !(self.false_positive_rate >= 0.0 && self.false_positive_rate.is_finite()) {
            return Err(Error::invalid("false positive rate must be non-negative"));
        }
        for (lo, hi) in [self.tp_score, self.fp_score] {
            if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
                return Err(Error::invalid("score ranges must lie in [0, 1]"));
            }
        }
        Ok(())
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent random stream for one (seed, image, scale, slot) tuple.
fn stream(seed: u64, image_id: u64, tag: ScaleTag, slot: u64) -> ChaCha8Rng {
    let mut h = splitmix(seed);
    for part in [image_id, tag.factor().to_bits(), slot] {
        h = splitmix(h ^ part);
    }
    ChaCha8Rng::seed_from_u64(h)
}

const FP_SLOT: u64 = u64::MAX;

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Synthetic detector that perturbs ground truth.
///
/// Recall depends on the size of each box *as presented*, so upscaling an
/// image moves small instances into the better-detected regime.
pub struct OracleDetector {
    images: HashMap<u64, (ImageRecord, Vec<Annotation>)>,
    categories: Vec<u64>,
    cfg: OracleConfig,
}

impl OracleDetector {
    pub fn new(dataset: &AnnotatedDataset, cfg: OracleConfig) -> Result<Self> {
        cfg.validate()?;
        let by_image = dataset.annotations_by_image();
        let images = dataset
            .images
            .iter()
            .map(|img| {
                let anns = by_image
                    .get(&img.image_id)
                    .map(|v| {
                        v.iter()
                            .filter(|a| !a.iscrowd)
                            .map(|a| (*a).clone())
                            .collect()
                    })
                    .unwrap_or_default();
                (img.image_id, (img.clone(), anns))
            })
            .collect();
        Ok(OracleDetector {
            images,
            categories: dataset.category_ids(),
            cfg,
        })
    }

    pub fn config(&self) -> &OracleConfig {
        &self.cfg
    }

    fn recall_for(&self, native: &BBox, presented: &BBox) -> f64 {
        let t = &self.cfg.size_thresholds;
        let native_class = t.class_of(native.area());
        let presented_class = t.class_of(presented.area());
        if native_class == SizeClass::Small && presented_class != SizeClass::Small {
            self.cfg.upscaled_small_recall
        } else {
            self.cfg.recall_curve.get(presented_class)
        }
    }

    fn jitter(&self, rng: &mut ChaCha8Rng, b: &BBox) -> Option<BBox> {
        let s = self.cfg.localization_noise;
        if s == 0.0 {
            return Some(*b);
        }
        let nx = Normal::new(0.0, s * b.w()).ok()?;
        let ny = Normal::new(0.0, s * b.h()).ok()?;
        let x1 = b.x() + nx.sample(rng);
        let y1 = b.y() + ny.sample(rng);
        let x2 = b.x2() + nx.sample(rng);
        let y2 = b.y2() + ny.sample(rng);
        BBox::from_corners(x1.min(x2), y1.min(y2), x1.max(x2), y1.max(y2)).ok()
    }
}

impl Detector for OracleDetector {
    fn detect(&self, req: &DetectRequest) -> Result<Vec<Detection>> {
        let (img, anns) = self
            .images
            .get(&req.image_id)
            .ok_or_else(|| Error::Adapter {
                image_id: req.image_id,
                message: "oracle has no ground truth for this image".into(),
            })?;
        let f = req.scale_tag.factor();
        let (pw, ph) = (img.width as f64 * f, img.height as f64 * f);
        let mut out = Vec::new();
        for a in anns {
            let mut rng = stream(self.cfg.seed, img.image_id, req.scale_tag, a.ann_id);
            let presented = scale_box(&a.bbox, f)?;
            let hit = rng.random::<f64>() < self.recall_for(&a.bbox, &presented);
            let jittered = self.jitter(&mut rng, &presented);
            let score = uniform(&mut rng, self.cfg.tp_score);
            if !hit {
                continue;
            }
            if let Some(b) = jittered.and_then(|b| clip_box(&b, pw, ph)) {
                out.push(Detection::new(img.image_id, a.category_id, b, Some(score))?);
            }
        }
        if self.cfg.false_positive_rate > 0.0 && !self.categories.is_empty() {
            let mut rng = stream(self.cfg.seed, img.image_id, req.scale_tag, FP_SLOT);
            let n = Poisson::new(self.cfg.false_positive_rate)
                .map(|p| p.sample(&mut rng) as usize)
                .unwrap_or(0);
            for _ in 0..n {
                let w = pw * rng.random_range(0.02..0.3);
                let h = ph * rng.random_range(0.02..0.3);
                let x = rng.random_range(0.0..(pw - w));
                let y = rng.random_range(0.0..(ph - h));
                let cat = self.categories[rng.random_range(0..self.categories.len())];
                let score = uniform(&mut rng, self.cfg.fp_score);
                out.push(Detection::new(
                    img.image_id,
                    cat,
                    BBox::new(x, y, w, h)?,
                    Some(score),
                )?);
            }
        }
        Ok(out)
    }

    fn needs_pixels(&self) -> bool {
        false
    }
}
