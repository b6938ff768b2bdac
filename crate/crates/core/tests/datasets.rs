mod common;

use std::collections::BTreeSet;
use std::path::Path;

use common::{category_list, medium_large_fixture, write_images};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scaledet::cocodata::{
    dataset_to_json, load_dataset, load_detections, parse_detections, save_dataset,
    save_detections, size_histogram, AnnotatedDataset, Annotation, Detection, DetectionSet,
    ImageRecord,
};
use scaledet::geometry::{classify_size, BBox, SizeClass, SizeThresholds};
use scaledet::raster::GaussianSpec;
use scaledet::raster::{load_image, save_image, ImageBuffer};
use scaledet::transforms::{
    assemble_distillation, strip_small, synthesize_augmented, synthesize_down_train, AugmentConfig,
    AugmentMode, DistillConfig, DownTrainConfig, MixRatio, SynthesisPaths,
};

/// 1000 non-crowd instances, exactly 414 of them small, plus 5 crowd regions.
fn coco_ratio_fixture() -> AnnotatedDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(414);
    let images: Vec<ImageRecord> = (1..=50)
        .map(|id| ImageRecord {
            image_id: id,
            width: 640,
            height: 480,
            file_name: format!("{id}.ppm"),
        })
        .collect();
    let mut anns = Vec::new();
    for i in 0..1005u64 {
        let side: f64 = if i < 414 {
            rng.random_range(4.0..31.9)
        } else {
            rng.random_range(32.5..300.0)
        };
        let bbox = BBox::new(
            rng.random_range(0.0..300.0),
            rng.random_range(0.0..170.0),
            side,
            side,
        )
        .unwrap();
        anns.push(Annotation {
            ann_id: i + 1,
            image_id: i % 50 + 1,
            category_id: i % 3 + 1,
            area: bbox.area(),
            bbox,
            iscrowd: i >= 1000,
        });
    }
    AnnotatedDataset::new(images, anns, category_list(3)).unwrap()
}

#[test]
fn coco_ratio_stats_and_strip() {
    let d = coco_ratio_fixture();
    let t = SizeThresholds::default();
    let h = size_histogram(&d, &t);
    assert_eq!(h.global.total(), 1000);
    assert_eq!(h.iscrowd, 5);
    assert!((h.global.small_fraction().unwrap() - 0.414).abs() < 1e-3);

    let s = strip_small(&d, &t);
    let kept = s.annotations.iter().filter(|a| !a.iscrowd).count();
    assert!((kept as f64 / 1000.0 - 0.586).abs() < 1e-3);
    assert_eq!(s.annotations.iter().filter(|a| a.iscrowd).count(), 5);
    assert_eq!(strip_small(&s, &t), s);
}

#[test]
fn iscrowd_only_and_empty_histograms() {
    let mut d = coco_ratio_fixture();
    d.annotations.retain(|a| a.iscrowd);
    let h = size_histogram(&d, &SizeThresholds::default());
    assert_eq!((h.global.total(), h.iscrowd), (0, 5));
    let empty = AnnotatedDataset::default();
    let h = size_histogram(&empty, &SizeThresholds::default());
    assert_eq!((h.global.total(), h.iscrowd), (0, 0));
    assert_eq!(h.global.small_fraction(), None);
}

#[test]
fn ten_thousand_annotations_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(10_000);
    let images: Vec<ImageRecord> = (1..=100)
        .map(|id| ImageRecord {
            image_id: id,
            width: 1000,
            height: 800,
            file_name: format!("dir/{id}.ppm"),
        })
        .collect();
    let anns: Vec<Annotation> = (1..=10_000u64)
        .map(|id| {
            let bbox = BBox::new(
                rng.random_range(0.0..500.0),
                rng.random_range(0.0..400.0),
                rng.random_range(0.1..400.0),
                rng.random_range(0.1..300.0),
            )
            .unwrap();
            Annotation {
                ann_id: id,
                image_id: rng.random_range(1..=100),
                category_id: rng.random_range(1..=80),
                area: bbox.area() * rng.random_range(0.3..1.0),
                bbox,
                iscrowd: rng.random_bool(0.01),
            }
        })
        .collect();
    let d = AnnotatedDataset::new(images, anns, category_list(80)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("gt.json");
    save_dataset(&d, &p).unwrap();
    let back = load_dataset(&p).unwrap();
    assert_eq!(back.annotations.len(), 10_000);
    for (a, b) in d.annotations.iter().zip(&back.annotations) {
        assert_eq!(
            (a.ann_id, a.image_id, a.category_id, a.iscrowd),
            (b.ann_id, b.image_id, b.category_id, b.iscrowd)
        );
        assert!((a.area - b.area).abs() <= 1e-6);
        for (x, y) in a.bbox.to_array().iter().zip(b.bbox.to_array()) {
            assert!((x - y).abs() <= 1e-6);
        }
    }
    assert_eq!(back, d);
}

#[test]
fn thousand_detections_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    let dets: Vec<Detection> = (0..1000)
        .map(|_| {
            let b = BBox::new(
                rng.random_range(-5.0..500.0),
                rng.random_range(-5.0..500.0),
                rng.random_range(0.5..200.0),
                rng.random_range(0.5..200.0),
            )
            .unwrap();
            Detection::new(
                rng.random_range(1..50),
                rng.random_range(1..5),
                b,
                Some(rng.random()),
            )
            .unwrap()
        })
        .collect();
    let set = DetectionSet::new(dets);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("dets.json");
    save_detections(&set, &p).unwrap();
    assert_eq!(load_detections(&p).unwrap(), set);
    assert!(parse_detections(b"[]", Path::new("x")).unwrap().is_empty());
}

fn synth_env(n: u64) -> (tempfile::TempDir, AnnotatedDataset, SynthesisPaths) {
    let dir = tempfile::tempdir().unwrap();
    let d = medium_large_fixture(n, 96, 72, 2, n);
    write_images(&d, dir.path());
    let paths = SynthesisPaths {
        images_root: dir.path().to_path_buf(),
        output_dir: dir.path().join("out"),
    };
    (dir, d, paths)
}

#[test]
fn down_train_makes_medium_instances_small() {
    let (_dir, d, paths) = synth_env(100);
    let cfg = DownTrainConfig::new(1.0 / 3.0, MixRatio::default(), 3).unwrap();
    let out = synthesize_down_train(&d, &paths, &cfg).unwrap();
    assert_eq!(out.requested, 71);
    let t = SizeThresholds::default();
    let src = d.annotations_by_image();
    for (id, entry) in &out.manifest.entries {
        assert_eq!(entry.transform, "downscale");
        let img = out.dataset.image(*id).unwrap();
        assert_eq!((img.width, img.height), (32, 24));
        let pixels = load_image(paths.images_root.join(&img.file_name)).unwrap();
        assert_eq!((pixels.width(), pixels.height()), (32, 24));
        for a in out.dataset.annotations.iter().filter(|a| a.image_id == *id) {
            assert_eq!(classify_size(a.area, &t).unwrap(), SizeClass::Small);
        }
        assert!(src.contains_key(&entry.source_image_id));
    }
    // Fresh, unique ids.
    let ids: BTreeSet<u64> = out.dataset.annotations.iter().map(|a| a.ann_id).collect();
    assert_eq!(ids.len(), out.dataset.annotations.len());
    assert!(out.manifest.entries.keys().all(|&k| k > 100));
}

#[test]
fn synthesis_is_deterministic_per_seed() {
    let run = |seed| {
        let (dir, d, paths) = synth_env(30);
        let cfg = DownTrainConfig::new(0.5, MixRatio::default(), seed).unwrap();
        let out = synthesize_down_train(&d, &paths, &cfg).unwrap();
        let mut files: Vec<(String, Vec<u8>)> = out
            .dataset
            .images
            .iter()
            .skip(30)
            .map(|i| {
                (
                    i.file_name.clone(),
                    std::fs::read(dir.path().join(&i.file_name)).unwrap(),
                )
            })
            .collect();
        files.sort();
        (dataset_to_json(&out.dataset).unwrap(), files)
    };
    let a = run(5);
    assert_eq!(a, run(5));
    assert_ne!(a.0, run(6).0);
}

#[test]
fn augmented_copies_keep_geometry() {
    let (_dir, d, paths) = synth_env(20);
    let cfg = AugmentConfig::new(
        AugmentMode::ScaleReScale { gamma: 3.0 },
        MixRatio::default(),
        1,
    )
    .unwrap();
    let out = synthesize_augmented(&d, &paths, &cfg).unwrap();
    assert_eq!(out.manifest.entries.len(), 14);
    let by_image = out.dataset.annotations_by_image();
    let src = d.annotations_by_image();
    for (id, entry) in &out.manifest.entries {
        assert_eq!(entry.transform, "down_up");
        let src_img = d.image(entry.source_image_id).unwrap();
        let img = out.dataset.image(*id).unwrap();
        assert_eq!((img.width, img.height), (src_img.width, src_img.height));
        let a = &by_image[id];
        let b = &src[&entry.source_image_id];
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert_eq!(
                (x.bbox, x.area, x.category_id),
                (y.bbox, y.area, y.category_id)
            );
        }
    }
}

#[test]
fn blur_of_constant_image_is_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut d = medium_large_fixture(4, 64, 48, 1, 2);
    for img in &mut d.images {
        img.file_name = format!("c{}.ppm", img.image_id);
        save_image(
            &ImageBuffer::filled(64, 48, 3, 0.4).unwrap(),
            dir.path().join(&img.file_name),
        )
        .unwrap();
    }
    let paths = SynthesisPaths::in_place(dir.path());
    let cfg = AugmentConfig::new(
        AugmentMode::Blur(GaussianSpec::new(7, 1.4).unwrap()),
        MixRatio::new(0.5).unwrap(),
        0,
    )
    .unwrap();
    let out = synthesize_augmented(&d, &paths, &cfg).unwrap();
    assert_eq!(out.manifest.entries.len(), 4);
    for (id, e) in &out.manifest.entries {
        assert_eq!(e.transform, "gaussian_blur");
        let syn =
            std::fs::read(dir.path().join(&out.dataset.image(*id).unwrap().file_name)).unwrap();
        let src = std::fs::read(
            dir.path()
                .join(&d.image(e.source_image_id).unwrap().file_name),
        )
        .unwrap();
        assert_eq!(syn, src);
    }
}

#[test]
fn tiny_images_are_skipped_and_reported() {
    let dir = tempfile::tempdir().unwrap();
    let images = vec![
        ImageRecord {
            image_id: 1,
            width: 20,
            height: 20,
            file_name: "a.ppm".into(),
        },
        ImageRecord {
            image_id: 2,
            width: 90,
            height: 90,
            file_name: "b.ppm".into(),
        },
    ];
    let d = AnnotatedDataset::new(images, vec![], category_list(1)).unwrap();
    write_images(&d, dir.path());
    let cfg = DownTrainConfig::new(1.0 / 3.0, MixRatio::new(0.5).unwrap(), 0).unwrap();
    let out = synthesize_down_train(&d, &SynthesisPaths::in_place(dir.path()), &cfg).unwrap();
    assert_eq!(out.requested, 2);
    assert_eq!(out.skipped.len(), 1);
    assert_eq!(out.skipped[0].source_image_id, 1);
    assert_eq!(out.dataset.images.len(), 3);
}

#[test]
fn missing_source_image_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let d = medium_large_fixture(3, 96, 72, 1, 1);
    let cfg = DownTrainConfig::new(0.5, MixRatio::default(), 0).unwrap();
    let r = synthesize_down_train(&d, &SynthesisPaths::in_place(dir.path()), &cfg);
    assert!(matches!(r, Err(scaledet::Error::Io { .. })));
}

#[test]
fn distillation_with_downscaled_copies() {
    let (_dir, d, paths) = synth_env(10);
    let t = SizeThresholds::default();
    // One pseudo box per image, small and confident.
    let pseudo = DetectionSet::new(
        d.images
            .iter()
            .map(|i| {
                Detection::new(
                    i.image_id,
                    1,
                    BBox::new(1.0, 1.0, 20.0, 20.0).unwrap(),
                    Some(0.9),
                )
                .unwrap()
            })
            .collect(),
    );
    let cfg = DistillConfig::new(0.5, t, true, 1.0 / 3.0).unwrap();
    let out = assemble_distillation(&d, &pseudo, &cfg, &paths).unwrap();
    assert_eq!(out.report.pseudo_accepted, 10);
    assert!(out.report.downscaled_images > 0);
    for (id, e) in &out.manifest.entries {
        assert_eq!(e.transform, "downscale_small_only");
        let anns: Vec<_> = out
            .dataset
            .annotations
            .iter()
            .filter(|a| a.image_id == *id)
            .collect();
        assert!(!anns.is_empty());
        assert!(anns.iter().all(|a| a.iscrowd || a.area < t.small_max()));
    }
    let small_total: usize = out
        .manifest
        .entries
        .keys()
        .map(|id| {
            out.dataset
                .annotations
                .iter()
                .filter(|a| a.image_id == *id && !a.iscrowd)
                .count()
        })
        .sum();
    assert_eq!(small_total, out.report.downscaled_small_instances);
}

#[test]
fn distill_boundary_case() {
    let d = medium_large_fixture(1, 200, 200, 1, 3);
    let t = SizeThresholds::default();
    let cfg = DistillConfig::new(0.7, t, false, 1.0 / 3.0).unwrap();
    let paths = SynthesisPaths::in_place(".");
    let small = Detection::new(1, 1, BBox::new(0.0, 0.0, 20.0, 25.0).unwrap(), Some(0.8)).unwrap();
    let large = Detection::new(1, 1, BBox::new(0.0, 0.0, 50.0, 100.0).unwrap(), Some(0.8)).unwrap();
    let r = assemble_distillation(&d, &DetectionSet::new(vec![small]), &cfg, &paths).unwrap();
    assert_eq!(r.report.pseudo_accepted, 1);
    let r = assemble_distillation(&d, &DetectionSet::new(vec![large]), &cfg, &paths).unwrap();
    assert_eq!(
        (r.report.pseudo_accepted, r.report.rejected_not_small),
        (0, 1)
    );
}
