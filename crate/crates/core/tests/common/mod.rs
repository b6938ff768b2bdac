//! Shared fixtures and an independent reference evaluator.
//!
//! The reference evaluator is deliberately naive: corner-form IoU, a direct
//! greedy scan over the ground truth for every detection, and interpolated
//! precision computed as a max over all ranks with sufficient recall. It shares
//! no code with the library's matcher or PR accumulation.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use scaledet::cocodata::{
    AnnotatedDataset, Annotation, Category, Detection, DetectionSet, ImageRecord,
};
use scaledet::geometry::BBox;

// ---------------------------------------------------------------------------
// Reference evaluator

#[derive(Debug, Clone)]
pub struct RefConfig {
    pub iou_thresholds: Vec<f64>,
    pub max_dets: usize,
    pub small_max: f64,
    pub medium_max: f64,
    pub recall_samples: usize,
}

impl Default for RefConfig {
    fn default() -> Self {
        RefConfig {
            iou_thresholds: (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect(),
            max_dets: 100,
            small_max: 1024.0,
            medium_max: 9216.0,
            recall_samples: 101,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefAp {
    pub ap: f64,
    pub ap_s: f64,
    pub ap_m: f64,
    pub ap_l: f64,
}

fn corners(b: &BBox) -> (f64, f64, f64, f64) {
    (b.x(), b.y(), b.x() + b.w(), b.y() + b.h())
}

fn inter(a: &BBox, b: &BBox) -> f64 {
    let (ax1, ay1, ax2, ay2) = corners(a);
    let (bx1, by1, bx2, by2) = corners(b);
    let w = ax2.min(bx2) - ax1.max(bx1);
    let h = ay2.min(by2) - ay1.max(by1);
    if w <= 0.0 || h <= 0.0 {
        0.0
    } else {
        w * h
    }
}

pub fn ref_iou(a: &BBox, b: &BBox) -> f64 {
    let i = inter(a, b);
    let u = a.w() * a.h() + b.w() * b.h() - i;
    if u <= 0.0 {
        0.0
    } else {
        i / u
    }
}

/// Ranked outcome of one detection: `Some(true)` TP, `Some(false)` FP, `None` ignored.
fn match_one_image(
    gts: &[&Annotation],
    dets: &[&Detection],
    t: f64,
    lo: f64,
    hi: f64,
) -> (Vec<(f64, Option<bool>)>, usize) {
    let t = t.min(1.0 - 1e-10);
    let ignored: Vec<bool> = gts
        .iter()
        .map(|g| g.iscrowd || g.area < lo || g.area >= hi)
        .collect();
    let n_counted = ignored.iter().filter(|&&i| !i).count();
    let mut taken = vec![false; gts.len()];
    let mut out = Vec::new();
    for d in dets {
        let score = d.score.unwrap();
        // Best free counted ground truth; later entries win ties.
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if ignored[j] || taken[j] {
                continue;
            }
            let o = ref_iou(&d.bbox, &g.bbox);
            if o >= t && best.is_none_or(|(_, b)| o >= b) {
                best = Some((j, o));
            }
        }
        if let Some((j, _)) = best {
            taken[j] = true;
            out.push((score, Some(true)));
            continue;
        }
        // Otherwise an ignored region may absorb it; crowds never get used up.
        let mut absorbed: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if !ignored[j] || (taken[j] && !g.iscrowd) {
                continue;
            }
            let o = if g.iscrowd {
                inter(&d.bbox, &g.bbox) / (d.bbox.w() * d.bbox.h())
            } else {
                ref_iou(&d.bbox, &g.bbox)
            };
            if o >= t && absorbed.is_none_or(|(_, b)| o >= b) {
                absorbed = Some((j, o));
            }
        }
        if let Some((j, _)) = absorbed {
            if !gts[j].iscrowd {
                taken[j] = true;
            }
            out.push((score, None));
            continue;
        }
        let a = d.bbox.w() * d.bbox.h();
        if a < lo || a >= hi {
            out.push((score, None));
        } else {
            out.push((score, Some(false)));
        }
    }
    (out, n_counted)
}

fn interpolated_ap(ranked: &[bool], num_gt: usize, samples: usize) -> f64 {
    let mut prec = Vec::new();
    let mut rec = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for &hit in ranked {
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        prec.push(tp as f64 / (tp + fp) as f64);
        rec.push(tp as f64 / num_gt as f64);
    }
    let mut sum = 0.0;
    for i in 0..samples {
        let r = i as f64 / (samples - 1) as f64;
        let p = prec
            .iter()
            .zip(&rec)
            .filter(|(_, &rc)| rc >= r)
            .map(|(&p, _)| p)
            .fold(0.0f64, f64::max);
        sum += p;
    }
    sum / samples as f64
}

/// COCO-style AP computed by direct enumeration.
pub fn reference_ap(gt: &AnnotatedDataset, dets: &DetectionSet, cfg: &RefConfig) -> RefAp {
    let mut image_ids: Vec<u64> = gt.images.iter().map(|i| i.image_id).collect();
    image_ids.sort_unstable();
    let mut cats: Vec<u64> = gt.categories.iter().map(|c| c.id).collect();
    cats.sort_unstable();
    let bands = [
        (0.0, f64::INFINITY),
        (0.0, cfg.small_max),
        (cfg.small_max, cfg.medium_max),
        (cfg.medium_max, f64::INFINITY),
    ];
    let mut out = [0.0; 4];
    for (bi, &(lo, hi)) in bands.iter().enumerate() {
        let mut total = 0.0;
        let mut n = 0usize;
        for &t in &cfg.iou_thresholds {
            for &c in &cats {
                let mut records: Vec<(f64, Option<bool>)> = Vec::new();
                let mut num_gt = 0;
                for &img in &image_ids {
                    let gts: Vec<&Annotation> = gt
                        .annotations
                        .iter()
                        .filter(|a| a.image_id == img && a.category_id == c)
                        .collect();
                    let mut ds: Vec<&Detection> = dets
                        .detections
                        .iter()
                        .filter(|d| d.image_id == img && d.category_id == c)
                        .collect();
                    ds.sort_by(|a, b| b.score.unwrap().total_cmp(&a.score.unwrap()));
                    ds.truncate(cfg.max_dets);
                    let (r, k) = match_one_image(&gts, &ds, t, lo, hi);
                    records.extend(r);
                    num_gt += k;
                }
                if num_gt == 0 {
                    continue;
                }
                records.sort_by(|a, b| b.0.total_cmp(&a.0));
                let ranked: Vec<bool> = records.iter().filter_map(|r| r.1).collect();
                total += interpolated_ap(&ranked, num_gt, cfg.recall_samples);
                n += 1;
            }
        }
        out[bi] = if n == 0 { -1.0 } else { total / n as f64 };
    }
    RefAp {
        ap: out[0],
        ap_s: out[1],
        ap_m: out[2],
        ap_l: out[3],
    }
}

// ---------------------------------------------------------------------------
// Fixtures

pub fn category_list(n: u64) -> Vec<Category> {
    (1..=n)
        .map(|id| Category {
            id,
            name: format!("class{id}"),
        })
        .collect()
}

fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    (rng.random_range(lo.ln()..hi.ln())).exp()
}

/// A random box of side roughly in `[lo, hi)` placed fully inside `w x h`.
fn random_box(rng: &mut ChaCha8Rng, w: f64, h: f64, lo: f64, hi: f64) -> BBox {
    let bw = log_uniform(rng, lo, hi).min(w - 1.0);
    let bh = (bw * rng.random_range(0.6..1.6)).clamp(1.0, h - 1.0);
    let x = rng.random_range(0.0..w - bw);
    let y = rng.random_range(0.0..h - bh);
    BBox::new(x, y, bw, bh).unwrap()
}

fn jitter(rng: &mut ChaCha8Rng, b: &BBox, w: f64, h: f64) -> BBox {
    let s = rng.random_range(0.0..0.25);
    let dx = rng.random_range(-s..=s) * b.w();
    let dy = rng.random_range(-s..=s) * b.h();
    let sw = rng.random_range(1.0 - s..=1.0 + s);
    let sh = rng.random_range(1.0 - s..=1.0 + s);
    let nx = (b.x() + dx).clamp(0.0, w - 2.0);
    let ny = (b.y() + dy).clamp(0.0, h - 2.0);
    let nw = (b.w() * sw).clamp(1.0, w - nx);
    let nh = (b.h() * sh).clamp(1.0, h - ny);
    BBox::new(nx, ny, nw, nh).unwrap()
}

/// One random micro-instance: up to 3 images, at most 6 ground-truth boxes,
/// 6 detections and 3 categories per image, sizes spanning all classes and a
/// sprinkling of crowd regions and tied scores.
pub fn micro_instance(seed: u64) -> (AnnotatedDataset, DetectionSet) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (200.0, 200.0);
    let n_cat = rng.random_range(1..=3u64);
    let n_img = rng.random_range(1..=3u64);
    let tied = rng.random_bool(0.2);
    let mut images = Vec::new();
    let mut anns = Vec::new();
    let mut dets = Vec::new();
    let mut ann_id = 1;
    for img in 1..=n_img {
        images.push(ImageRecord {
            image_id: img,
            width: w as u32,
            height: h as u32,
            file_name: format!("{img}.ppm"),
        });
        let mut local: Vec<Annotation> = Vec::new();
        for _ in 0..rng.random_range(0..=6) {
            let bbox = random_box(&mut rng, w, h, 4.0, 160.0);
            let iscrowd = rng.random_bool(0.1);
            // Mask areas run a little below the box area.
            let area = bbox.area() * rng.random_range(0.55..=1.0);
            local.push(Annotation {
                ann_id,
                image_id: img,
                category_id: rng.random_range(1..=n_cat),
                bbox,
                area,
                iscrowd,
            });
            ann_id += 1;
        }
        for _ in 0..rng.random_range(0..=6) {
            let (bbox, cat) = if !local.is_empty() && rng.random_bool(0.65) {
                let g = &local[rng.random_range(0..local.len())];
                let cat = if rng.random_bool(0.85) {
                    g.category_id
                } else {
                    rng.random_range(1..=n_cat)
                };
                (jitter(&mut rng, &g.bbox, w, h), cat)
            } else {
                (
                    random_box(&mut rng, w, h, 4.0, 160.0),
                    rng.random_range(1..=n_cat),
                )
            };
            let mut score: f64 = rng.random_range(0.01..1.0);
            if tied {
                score = (score * 4.0).ceil() / 4.0;
            }
            dets.push(Detection::new(img, cat, bbox, Some(score)).unwrap());
        }
        anns.extend(local);
    }
    let gt = AnnotatedDataset::new(images, anns, category_list(n_cat)).unwrap();
    (gt, DetectionSet::new(dets))
}

/// Size mix of the scale fixture: share of small, medium and large objects.
pub const FIXTURE_MIX: [f64; 3] = [0.41, 0.34, 0.25];

/// 200 images of 640x480 with 8 objects each drawn from [`FIXTURE_MIX`].
///
/// Small objects have sides in [12, 32) so most of them cross into the medium
/// range when upscaled by 2; medium sides lie in [36, 92) and large in
/// [100, 300). Every tenth image also carries one crowd region.
pub fn scale_fixture(seed: u64) -> AnnotatedDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (640.0, 480.0);
    let mut images = Vec::new();
    let mut anns = Vec::new();
    let mut ann_id = 1;
    for img in 1..=200u64 {
        images.push(ImageRecord {
            image_id: img,
            width: w as u32,
            height: h as u32,
            file_name: format!("img{img:04}.ppm"),
        });
        let mut push = |bbox: BBox, cat: u64, iscrowd: bool, anns: &mut Vec<Annotation>| {
            anns.push(Annotation {
                ann_id,
                image_id: img,
                category_id: cat,
                area: bbox.area(),
                bbox,
                iscrowd,
            });
            ann_id += 1;
        };
        for _ in 0..8 {
            let u: f64 = rng.random();
            let (lo, hi) = if u < FIXTURE_MIX[0] {
                (12.0, 32.0)
            } else if u < FIXTURE_MIX[0] + FIXTURE_MIX[1] {
                (36.0, 92.0)
            } else {
                (100.0, 300.0)
            };
            let side = rng.random_range(lo..hi);
            let a: f64 = rng.random_range(0.8..1.25);
            let (bw, bh) = (side * a, side / a);
            let x = rng.random_range(0.0..w - bw);
            let y = rng.random_range(0.0..h - bh);
            push(
                BBox::new(x, y, bw, bh).unwrap(),
                rng.random_range(1..=3),
                false,
                &mut anns,
            );
        }
        if img % 10 == 0 {
            let bbox = BBox::new(
                rng.random_range(0.0..300.0),
                rng.random_range(0.0..200.0),
                200.0,
                150.0,
            )
            .unwrap();
            push(bbox, rng.random_range(1..=3), true, &mut anns);
        }
    }
    AnnotatedDataset::new(images, anns, category_list(3)).unwrap()
}

/// `n` images of `w x h` with `per_image` medium-sized boxes, no small ones.
pub fn medium_large_fixture(
    n: u64,
    w: u32,
    h: u32,
    per_image: usize,
    seed: u64,
) -> AnnotatedDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::new();
    let mut anns = Vec::new();
    let mut ann_id = 1;
    for img in 1..=n {
        images.push(ImageRecord {
            image_id: img,
            width: w,
            height: h,
            file_name: format!("sub/img{img:03}.ppm"),
        });
        for _ in 0..per_image {
            let bw = rng.random_range(33.0..(w as f64 * 0.9));
            let bh = rng.random_range(33.0..(h as f64 * 0.9));
            let bbox = BBox::new(
                rng.random_range(0.0..w as f64 - bw),
                rng.random_range(0.0..h as f64 - bh),
                bw,
                bh,
            )
            .unwrap();
            anns.push(Annotation {
                ann_id,
                image_id: img,
                category_id: rng.random_range(1..=2),
                area: bbox.area() * rng.random_range(0.7..=1.0),
                bbox,
                iscrowd: false,
            });
            ann_id += 1;
        }
    }
    AnnotatedDataset::new(images, anns, category_list(2)).unwrap()
}

/// Writes a deterministic RGB pattern for every image of `d` under `root`.
pub fn write_images(d: &AnnotatedDataset, root: &std::path::Path) {
    use scaledet::raster::{save_image, ImageBuffer};
    for img in &d.images {
        let (w, h) = (img.width as usize, img.height as usize);
        let mut data = Vec::with_capacity(w * h * 3);
        for y in 0..h {
            for x in 0..w {
                let v = ((x * 7 + y * 13 + img.image_id as usize * 31) % 256) as f64;
                data.extend(
                    [v, ((x ^ y) % 256) as f64, (255 - (x + y) % 256) as f64].map(|c| c / 255.0),
                );
            }
        }
        let buf = ImageBuffer::new(w, h, 3, data).unwrap();
        let path = root.join(&img.file_name);
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        save_image(&buf, &path).unwrap();
    }
}
