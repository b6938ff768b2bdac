mod common;

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use common::{category_list, scale_fixture, write_images};
use scaledet::cocodata::{AnnotatedDataset, Annotation, ImageRecord};
use scaledet::detector::{
    CachedDetector, DetectRequest, Detector, ImageSource, OracleConfig, OracleDetector,
    RecallCurve, ScaleTag, SubprocessDetector,
};
use scaledet::geometry::{iou, BBox, SizeClass, SizeThresholds};
use scaledet::pipeline::{run_single_pass, run_teacher, run_up_test, UpTestConfig};
use scaledet::Error;

fn sh(script: &str) -> SubprocessDetector {
    SubprocessDetector::new(vec!["sh".into(), "-c".into(), script.into(), "sh".into()]).unwrap()
}

fn request(path: &str) -> DetectRequest {
    DetectRequest {
        image_id: 3,
        image: ImageSource::Path(PathBuf::from(path)),
        scale_tag: ScaleTag::NATIVE,
    }
}

#[test]
fn subprocess_empty_output() {
    let d = sh("echo '[]'");
    assert!(d.detect(&request("x.ppm")).unwrap().is_empty());
}

#[test]
fn subprocess_one_record_takes_request_id() {
    let d = sh(
        r#"echo "[{\"image_id\": 99, \"category_id\": 2, \"bbox\": [1, 2, 3, 4], \"score\": 0.5}]""#,
    );
    let out = d.detect(&request("x.ppm")).unwrap();
    assert_eq!(out.len(), 1);
    assert_eq!(
        (out[0].image_id, out[0].category_id, out[0].score),
        (3, 2, Some(0.5))
    );
    assert_eq!(out[0].bbox.to_array(), [1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn subprocess_receives_image_path() {
    let d = sh(r#"case "$1" in */x.ppm) echo '[]';; *) exit 3;; esac"#);
    assert!(d.detect(&request("/data/x.ppm")).is_ok());
    assert!(d.detect(&request("/data/y.ppm")).is_err());
}

#[test]
fn subprocess_failure_carries_stderr() {
    let d = sh("echo 'model weights missing' >&2; exit 1");
    match d.detect(&request("x.ppm")) {
        Err(Error::Adapter { image_id, message }) => {
            assert_eq!(image_id, 3);
            assert!(message.contains("model weights missing"), "{message}");
        }
        other => panic!("expected adapter error, got {other:?}"),
    }
}

#[test]
fn subprocess_malformed_output_is_adapter_error() {
    let d = sh("echo 'not json'");
    assert!(matches!(
        d.detect(&request("x.ppm")),
        Err(Error::Adapter { .. })
    ));
}

#[test]
fn subprocess_timeout() {
    let d = sh("sleep 5").with_timeout(Duration::from_millis(200));
    let start = Instant::now();
    match d.detect(&request("x.ppm")) {
        Err(Error::Adapter { message, .. }) => assert!(message.contains("timed out")),
        other => panic!("expected timeout, got {other:?}"),
    }
    assert!(start.elapsed() < Duration::from_secs(4));
}

#[test]
fn subprocess_batch_mode_reuses_one_process() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("starts");
    let script = format!(
        r#"echo started >> '{}'; while read line; do echo '[{{"category_id": 1, "bbox": [0, 0, 5, 5], "score": 0.7}}]'; done"#,
        log.display()
    );
    let d = sh(&script).with_batch(true);
    for _ in 0..5 {
        assert_eq!(d.detect(&request("x.ppm")).unwrap().len(), 1);
    }
    drop(d);
    let starts = std::fs::read_to_string(&log).unwrap();
    assert_eq!(starts.lines().count(), 1);
}

fn image(id: u64, w: u32, h: u32) -> ImageRecord {
    ImageRecord {
        image_id: id,
        width: w,
        height: h,
        file_name: format!("{id}.ppm"),
    }
}

fn ann(id: u64, image_id: u64, bbox: [f64; 4]) -> Annotation {
    let bbox = BBox::new(bbox[0], bbox[1], bbox[2], bbox[3]).unwrap();
    Annotation {
        ann_id: id,
        image_id,
        category_id: 1,
        area: bbox.area(),
        bbox,
        iscrowd: false,
    }
}

#[test]
fn exec_adapter_sees_upscaled_pixels() {
    // The script answers with a box covering whatever image it is shown.
    let dir = tempfile::tempdir().unwrap();
    let d = AnnotatedDataset::new(vec![image(1, 30, 20)], vec![], category_list(1)).unwrap();
    write_images(&d, dir.path());
    let det = sh(
        r#"{ read m; read w h; } < "$1"; echo "[{\"category_id\": 1, \"bbox\": [0, 0, $w, $h], \"score\": 0.9}]""#,
    );
    let single = run_single_pass(&det, &d, Some(dir.path()), 0.05).unwrap();
    assert_eq!(single.detections[0].bbox.to_array(), [0.0, 0.0, 30.0, 20.0]);
    // Area 600 is gated out of pass 1; pass 2 sees 60x40 and maps it back.
    let up = run_up_test(&det, &d, Some(dir.path()), &UpTestConfig::default()).unwrap();
    assert_eq!(up.len(), 1);
    assert_eq!(up.detections[0].pass, Some(2));
    assert_eq!(up.detections[0].bbox.to_array(), [0.0, 0.0, 30.0, 20.0]);
}

#[test]
fn exec_adapter_errors_name_the_image() {
    let d = AnnotatedDataset::new(vec![image(7, 30, 20)], vec![], category_list(1)).unwrap();
    let det = sh("exit 2");
    match run_single_pass(&det, &d, Some(Path::new("/nonexistent")), 0.0) {
        Err(Error::Adapter { image_id, .. }) => assert_eq!(image_id, 7),
        other => panic!("expected adapter error, got {other:?}"),
    }
}

#[test]
fn cache_replays_each_pass() {
    let text = br#"{"entries": [
        {"image_id": 1, "scale_tag": "x1", "detections": [
            {"category_id": 1, "bbox": [0, 0, 100, 100], "score": 0.9}]},
        {"image_id": 1, "scale_tag": "x2", "detections": [
            {"category_id": 1, "bbox": [10, 10, 40, 40], "score": 0.8}]}
    ]}"#;
    let cache = CachedDetector::from_slice(text, Path::new("cache.json")).unwrap();
    let d = AnnotatedDataset::new(vec![image(1, 200, 200)], vec![], category_list(1)).unwrap();
    let out = run_up_test(&cache, &d, None, &UpTestConfig::default()).unwrap();
    let mut boxes: Vec<_> = out
        .detections
        .iter()
        .map(|d| (d.pass, d.bbox.to_array()))
        .collect();
    boxes.sort_by_key(|b| b.0);
    assert_eq!(
        boxes,
        vec![
            (Some(1), [0.0, 0.0, 100.0, 100.0]),
            (Some(2), [5.0, 5.0, 20.0, 20.0])
        ]
    );
    let other_alpha = UpTestConfig {
        alpha: 3.0,
        ..UpTestConfig::default()
    };
    assert!(matches!(
        run_up_test(&cache, &d, None, &other_alpha),
        Err(Error::CacheMiss { .. }) | Err(Error::Adapter { .. })
    ));
}

fn small_blind_oracle(d: &AnnotatedDataset) -> OracleDetector {
    OracleDetector::new(
        d,
        OracleConfig {
            recall_curve: RecallCurve {
                small: 0.0,
                medium: 1.0,
                large: 1.0,
            },
            upscaled_small_recall: 1.0,
            localization_noise: 0.0,
            false_positive_rate: 0.0,
            ..OracleConfig::default()
        },
    )
    .unwrap()
}

#[test]
fn upscaled_pass_recovers_small_box() {
    let d = AnnotatedDataset::new(
        vec![image(1, 200, 200)],
        vec![ann(1, 1, [30.0, 40.0, 20.0, 20.0])],
        category_list(1),
    )
    .unwrap();
    let oracle = small_blind_oracle(&d);
    assert!(run_single_pass(&oracle, &d, None, 0.05).unwrap().is_empty());
    let up = run_up_test(&oracle, &d, None, &UpTestConfig::default()).unwrap();
    assert_eq!(up.len(), 1);
    assert_eq!(up.detections[0].pass, Some(2));
    assert!(iou(&up.detections[0].bbox, &d.annotations[0].bbox) > 1.0 - 1e-9);
}

#[test]
fn large_box_survives_exactly_once() {
    let d = AnnotatedDataset::new(
        vec![image(1, 400, 400)],
        vec![ann(1, 1, [50.0, 50.0, 100.0, 100.0])],
        category_list(1),
    )
    .unwrap();
    let oracle = OracleDetector::new(&d, OracleConfig::identity(1)).unwrap();
    let up = run_up_test(&oracle, &d, None, &UpTestConfig::default()).unwrap();
    assert_eq!(up.len(), 1);
    assert_eq!(up.detections[0].pass, Some(1));
}

#[test]
fn identity_oracle_echoes_non_crowd_ground_truth() {
    let d = scale_fixture(1);
    let oracle = OracleDetector::new(&d, OracleConfig::identity(4)).unwrap();
    let out = run_single_pass(&oracle, &d, None, 0.0).unwrap();
    let mut want: Vec<_> = d
        .annotations
        .iter()
        .filter(|a| !a.iscrowd)
        .map(|a| (a.image_id, a.bbox.to_array()))
        .collect();
    let mut got: Vec<_> = out
        .detections
        .iter()
        .map(|x| (x.image_id, x.bbox.to_array()))
        .collect();
    let key = |v: &(u64, [f64; 4])| (v.0, v.1.map(f64::to_bits));
    want.sort_by_key(key);
    got.sort_by_key(key);
    assert_eq!(got, want);
    assert!(out
        .detections
        .iter()
        .all(|x| (0.6..=1.0).contains(&x.score.unwrap())));
}

#[test]
fn empty_inputs_give_empty_outputs() {
    let d = AnnotatedDataset::default();
    let oracle = OracleDetector::new(&d, OracleConfig::default()).unwrap();
    assert!(run_single_pass(&oracle, &d, None, 0.0).unwrap().is_empty());
    assert!(run_teacher(&oracle, &d, None, &UpTestConfig::default())
        .unwrap()
        .is_empty());
}

#[test]
fn per_image_counts_match_direct_draws() {
    let mut d = scale_fixture(2);
    let keep: Vec<u64> = (1..=10).collect();
    d.images.retain(|i| keep.contains(&i.image_id));
    d.annotations.retain(|a| keep.contains(&a.image_id));
    let cfg = OracleConfig {
        false_positive_rate: 0.0,
        seed: 21,
        ..OracleConfig::default()
    };
    let oracle = OracleDetector::new(&d, cfg).unwrap();
    let out = run_single_pass(&oracle, &d, None, 0.0).unwrap();
    let by_image = out.by_image();
    for img in &d.images {
        let direct = oracle
            .detect(&DetectRequest {
                image_id: img.image_id,
                image: ImageSource::Path(img.file_name.clone().into()),
                scale_tag: ScaleTag::NATIVE,
            })
            .unwrap();
        let got = by_image.get(&img.image_id).map_or(0, Vec::len);
        assert_eq!(got, direct.len());
    }
}

#[test]
fn false_positive_count_is_poisson() {
    let images: Vec<ImageRecord> = (1..=1000).map(|i| image(i, 640, 480)).collect();
    let d = AnnotatedDataset::new(images, vec![], category_list(3)).unwrap();
    let oracle = OracleDetector::new(&d, OracleConfig::default()).unwrap();
    let n = run_single_pass(&oracle, &d, None, 0.0).unwrap().len() as f64;
    let sigma = 500f64.sqrt();
    assert!((n - 500.0).abs() <= 3.0 * sigma, "{n} false positives");
}

#[test]
fn teacher_boxes_overlap_small_ground_truth() {
    let d = scale_fixture(3);
    let oracle = OracleDetector::new(
        &d,
        OracleConfig {
            false_positive_rate: 0.0,
            ..OracleConfig::default()
        },
    )
    .unwrap();
    let pseudo = run_teacher(&oracle, &d, None, &UpTestConfig::default()).unwrap();
    assert!(!pseudo.is_empty());
    let t = SizeThresholds::default();
    let by_image = d.annotations_by_image();
    for p in &pseudo.detections {
        assert_eq!(p.pass, Some(2));
        let best = by_image[&p.image_id]
            .iter()
            .filter(|a| !a.iscrowd && t.class_of(a.area) == SizeClass::Small)
            .map(|a| iou(&p.bbox, &a.bbox))
            .fold(0.0, f64::max);
        assert!(best >= 0.5, "pseudo box {:?} best IoU {best}", p.bbox);
    }
}

#[test]
fn up_test_is_deterministic() {
    let d = scale_fixture(4);
    let oracle = OracleDetector::new(&d, OracleConfig::default()).unwrap();
    let a = run_up_test(&oracle, &d, None, &UpTestConfig::default()).unwrap();
    let b = run_up_test(&oracle, &d, None, &UpTestConfig::default()).unwrap();
    assert_eq!(a, b);
}
