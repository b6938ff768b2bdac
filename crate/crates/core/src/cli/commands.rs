use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use log::{info, warn};
use regex::Regex;
use serde::Serialize;
use serde_json::{json, Value};

use super::args::*;
use super::{ensure_parent, sidecar, usage, write_json, CliError, RunContext};
use crate::cocodata::{
    load_dataset, load_detections, save_dataset, save_detections, size_histogram,
};
use crate::detector::{
    CachedDetector, Detector, OracleConfig, OracleDetector, RecallCurve, SubprocessDetector,
};
use crate::error::Error;
use crate::eval::{
    diff_detections, evaluate, fixed_set_pr, pr_curves_csv, render_diff_overlay, report_csv,
    AreaSource, DiffLabel, DiffSide, EvalConfig, SizeBand,
};
use crate::fsutil::write_atomic;
use crate::geometry::SizeThresholds;
use crate::pipeline::{run_single_pass, run_teacher, run_up_test, UpTestConfig};
use crate::raster::{load_image, save_image, GaussianSpec};
use crate::transforms::{
    assemble_distillation, strip_small, synthesize_augmented, synthesize_down_train, AugmentConfig,
    AugmentMode, DistillConfig, DownTrainConfig, MixRatio, SynthesisOutput, SynthesisPaths,
};

type CmdResult = Result<(), CliError>;

const MANIFEST_SUFFIX: &str = ".manifest.json";
const DIR_MANIFEST: &str = "manifest.json";
const DEFAULT_BETA: f64 = 1.0 / 3.0;

fn req<T: Clone>(v: &Option<T>, flag: &str) -> Result<T, CliError> {
    v.clone()
        .ok_or_else(|| usage(format!("missing required {flag}")))
}

/// Maps library validation failures on flag values to usage errors.
fn flag<T>(r: crate::Result<T>) -> Result<T, CliError> {
    r.map_err(|e| match e {
        Error::InvalidArgument(m) => usage(m),
        other => CliError::Run(other),
    })
}

fn thresholds(s: &SizeArgs) -> Result<SizeThresholds, CliError> {
    let d = SizeThresholds::default();
    flag(SizeThresholds::new(
        s.small_max.unwrap_or(d.small_max()),
        s.medium_max.unwrap_or(d.medium_max()),
    ))
}

fn area_source(a: Option<AreaSourceArg>) -> AreaSource {
    match a {
        Some(AreaSourceArg::BboxWh) => AreaSource::BboxWh,
        _ => AreaSource::AnnotationArea,
    }
}

// ---------------------------------------------------------------------------
// Dataset commands

#[derive(Serialize)]
struct CategoryStats<'a> {
    category_id: u64,
    name: &'a str,
    small: usize,
    medium: usize,
    large: usize,
    iscrowd: usize,
}

pub(super) fn stats(ctx: &RunContext, a: StatsArgs) -> CmdResult {
    let gt_path = req(&a.gt, "--gt")?;
    let t = thresholds(&a.size)?;
    let format = a.format.unwrap_or(StatsFormat::Json);
    let d = load_dataset(&gt_path)?;
    let h = size_histogram(&d, &t);
    let names: BTreeMap<u64, &str> = d
        .categories
        .iter()
        .map(|c| (c.id, c.name.as_str()))
        .collect();
    let rows: Vec<CategoryStats> = h
        .per_category
        .iter()
        .map(|(&id, c)| CategoryStats {
            category_id: id,
            name: names.get(&id).copied().unwrap_or(""),
            small: c.small,
            medium: c.medium,
            large: c.large,
            iscrowd: h.iscrowd_per_category.get(&id).copied().unwrap_or(0),
        })
        .collect();

    let bytes = match format {
        StatsFormat::Json => {
            let v = json!({
                "num_images": d.images.len(),
                "num_annotations": d.annotations.len(),
                "size_thresholds": t,
                "small": h.global.small,
                "medium": h.global.medium,
                "large": h.global.large,
                "small_fraction": h.global.small_fraction(),
                "iscrowd": h.iscrowd,
                "per_category": rows,
            });
            let mut b =
                serde_json::to_vec_pretty(&v).map_err(|e| Error::Serialize(e.to_string()))?;
            b.push(b'\n');
            b
        }
        StatsFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            let ser = |e: csv::Error| Error::Serialize(e.to_string());
            w.write_record(["category_id", "name", "small", "medium", "large", "iscrowd"])
                .map_err(ser)?;
            for r in &rows {
                w.write_record([
                    r.category_id.to_string(),
                    r.name.to_string(),
                    r.small.to_string(),
                    r.medium.to_string(),
                    r.large.to_string(),
                    r.iscrowd.to_string(),
                ])
                .map_err(ser)?;
            }
            w.write_record([
                "all".to_string(),
                String::new(),
                h.global.small.to_string(),
                h.global.medium.to_string(),
                h.global.large.to_string(),
                h.iscrowd.to_string(),
            ])
            .map_err(ser)?;
            w.into_inner()
                .map_err(|e| Error::Serialize(e.to_string()))?
        }
    };
    match &a.out {
        Some(out) => {
            ensure_parent(out)?;
            write_atomic(out, &bytes)?;
            let cfg = json!({"format": format, "size_thresholds": t});
            let m = ctx.manifest(cfg, None, &[&gt_path], &[out]);
            write_json(&sidecar(out, MANIFEST_SUFFIX), &m)
        }
        None => {
            use std::io::Write;
            std::io::stdout()
                .write_all(&bytes)
                .map_err(|e| Error::io("<stdout>", e))?;
            Ok(())
        }
    }
}

pub(super) fn strip(ctx: &RunContext, a: StripArgs) -> CmdResult {
    let gt_path = req(&a.gt, "--gt")?;
    let out = req(&a.out, "--out")?;
    let t = thresholds(&a.size)?;
    let d = load_dataset(&gt_path)?;
    let stripped = strip_small(&d, &t);
    info!(
        "removed {} small annotations",
        d.annotations.len() - stripped.annotations.len()
    );
    ensure_parent(&out)?;
    save_dataset(&stripped, &out)?;
    let m = ctx.manifest(json!({"size_thresholds": t}), None, &[&gt_path], &[&out]);
    write_json(&sidecar(&out, MANIFEST_SUFFIX), &m)
}

fn synth_paths(c: &SynthCommon) -> Result<(PathBuf, SynthesisPaths), CliError> {
    let root = req(&c.images_root, "--images-root")?;
    let output_dir = c.out_images.clone().unwrap_or_else(|| root.clone());
    Ok((
        root.clone(),
        SynthesisPaths {
            images_root: root,
            output_dir,
        },
    ))
}

fn mix(c: &SynthCommon) -> Result<MixRatio, CliError> {
    match c.mix {
        Some(Ratio(f)) => flag(MixRatio::new(f)),
        None => Ok(MixRatio::default()),
    }
}

fn finish_synthesis(
    ctx: &RunContext,
    out_path: &Path,
    gt_path: &Path,
    root: &Path,
    out: &SynthesisOutput,
    config: Value,
    seed: u64,
) -> CmdResult {
    for s in &out.skipped {
        warn!("skipped image {}: {}", s.source_image_id, s.reason);
    }
    ensure_parent(out_path)?;
    save_dataset(&out.dataset, out_path)?;
    let synth = sidecar(out_path, ".synth.json");
    write_json(&synth, &out.manifest)?;
    let mut cfg = config;
    cfg["requested"] = json!(out.requested);
    cfg["skipped"] = json!(out.skipped);
    let m = ctx.manifest(cfg, Some(seed), &[gt_path, root], &[out_path, &synth]);
    write_json(&sidecar(out_path, MANIFEST_SUFFIX), &m)
}

pub(super) fn synth_down(ctx: &RunContext, a: SynthDownArgs) -> CmdResult {
    let gt_path = req(&a.common.gt, "--gt")?;
    let out_path = req(&a.common.out, "--out")?;
    let (root, paths) = synth_paths(&a.common)?;
    let seed = a.common.seed.unwrap_or(0);
    let beta = a.beta.map_or(DEFAULT_BETA, |r| r.0);
    let cfg = flag(DownTrainConfig::new(beta, mix(&a.common)?, seed))?;
    let d = load_dataset(&gt_path)?;
    let out = synthesize_down_train(&d, &paths, &cfg)?;
    let config = json!({
        "beta": cfg.beta,
        "mix": cfg.mix,
        "seed": seed,
        "output_images": paths.output_dir,
    });
    finish_synthesis(ctx, &out_path, &gt_path, &root, &out, config, seed)
}

pub(super) fn synth_aug(ctx: &RunContext, a: SynthAugArgs) -> CmdResult {
    let gt_path = req(&a.common.gt, "--gt")?;
    let out_path = req(&a.common.out, "--out")?;
    let mode = match (a.kernel, a.sigma, a.gamma) {
        (Some(_), _, Some(_)) | (_, Some(_), Some(_)) => {
            return Err(usage("--kernel/--sigma and --gamma are mutually exclusive"))
        }
        (None, None, Some(Ratio(g))) => AugmentMode::ScaleReScale { gamma: g },
        (None, None, None) => {
            return Err(usage(
                "choose a mode: --kernel/--sigma (blur) or --gamma (down-up)",
            ))
        }
        (k, s, None) => {
            AugmentMode::Blur(flag(GaussianSpec::new(k.unwrap_or(7), s.unwrap_or(1.4)))?)
        }
    };
    let (root, paths) = synth_paths(&a.common)?;
    let seed = a.common.seed.unwrap_or(0);
    let cfg = flag(AugmentConfig::new(mode, mix(&a.common)?, seed))?;
    let d = load_dataset(&gt_path)?;
    let out = synthesize_augmented(&d, &paths, &cfg)?;
    let config = json!({
        "augment": cfg.mode,
        "mix": cfg.mix,
        "seed": seed,
        "output_images": paths.output_dir,
    });
    finish_synthesis(ctx, &out_path, &gt_path, &root, &out, config, seed)
}

pub(super) fn distill(ctx: &RunContext, a: DistillArgs) -> CmdResult {
    let gt_path = req(&a.gt, "--gt")?;
    let pseudo_path = req(&a.pseudo, "--pseudo")?;
    let out_path = req(&a.out, "--out")?;
    let t = thresholds(&a.size)?;
    let downscaled = a.downscaled.unwrap_or(false);
    let cfg = flag(DistillConfig::new(
        a.conf_thresh.map_or(0.5, |r| r.0),
        t,
        downscaled,
        a.down_beta.map_or(DEFAULT_BETA, |r| r.0),
    ))?;
    let root = match (&a.images_root, downscaled) {
        (Some(r), _) => r.clone(),
        (None, false) => PathBuf::from("."),
        (None, true) => return Err(usage("--downscaled needs --images-root")),
    };
    let paths = SynthesisPaths {
        output_dir: a.out_images.clone().unwrap_or_else(|| root.clone()),
        images_root: root.clone(),
    };
    let d_ml = load_dataset(&gt_path)?;
    let pseudo = load_detections(&pseudo_path)?;
    let out = assemble_distillation(&d_ml, &pseudo, &cfg, &paths)?;
    for s in &out.skipped {
        warn!("skipped image {}: {}", s.source_image_id, s.reason);
    }

    ensure_parent(&out_path)?;
    save_dataset(&out.dataset, &out_path)?;
    let report_path = sidecar(&out_path, ".distill_report.json");
    write_json(&report_path, &out.report)?;
    let curve_path = sidecar(&out_path, ".threshold_curve.csv");
    let mut w = csv::Writer::from_writer(Vec::new());
    let ser = |e: csv::Error| Error::Serialize(e.to_string());
    w.write_record(["threshold", "accepted"]).map_err(ser)?;
    for p in &out.report.threshold_curve {
        w.write_record([p.threshold.to_string(), p.accepted.to_string()])
            .map_err(ser)?;
    }
    write_atomic(
        &curve_path,
        &w.into_inner()
            .map_err(|e| Error::Serialize(e.to_string()))?,
    )?;
    let mut outputs: Vec<&Path> = vec![&out_path, &report_path, &curve_path];
    let synth_path = sidecar(&out_path, ".synth.json");
    if downscaled {
        write_json(&synth_path, &out.manifest)?;
        outputs.push(&synth_path);
    }
    let m = ctx.manifest(
        json!({"distill": cfg, "output_images": paths.output_dir}),
        None,
        &[&gt_path, &pseudo_path, &root],
        &outputs,
    );
    write_json(&sidecar(&out_path, MANIFEST_SUFFIX), &m)
}

// ---------------------------------------------------------------------------
// Inference

/// Parsed `--adapter` value.
#[derive(Debug, Clone, PartialEq)]
pub enum AdapterSpec {
    Oracle(OracleConfig),
    Cached(PathBuf),
    Exec(String),
}

/// Parses `oracle[:k=v,...]`, `cached:<file>` or `exec:<command>`.
///
/// Oracle keys: `seed`, `small`, `medium`, `large` (recall by presented size
/// class), `upscaled`, `noise`, `fp`; the bare word `identity` selects a
/// perfect detector before later keys apply.
pub fn parse_adapter(spec: &str) -> Result<AdapterSpec, String> {
    let (kind, rest) = spec.split_once(':').unwrap_or((spec, ""));
    match kind {
        "oracle" => {
            let mut cfg = OracleConfig::default();
            for item in rest.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                if item == "identity" {
                    cfg = OracleConfig::identity(cfg.seed);
                    continue;
                }
                let (k, v) = item
                    .split_once('=')
                    .ok_or_else(|| format!("oracle option {item:?} is not key=value"))?;
                let num = || {
                    v.parse::<f64>()
                        .map_err(|_| format!("bad value for {k}: {v:?}"))
                };
                match k {
                    "seed" => cfg.seed = v.parse().map_err(|_| format!("bad seed {v:?}"))?,
                    "small" => cfg.recall_curve.small = num()?,
                    "medium" => cfg.recall_curve.medium = num()?,
                    "large" => cfg.recall_curve.large = num()?,
                    "recall" => cfg.recall_curve = RecallCurve::uniform(num()?),
                    "upscaled" => cfg.upscaled_small_recall = num()?,
                    "noise" => cfg.localization_noise = num()?,
                    "fp" => cfg.false_positive_rate = num()?,
                    _ => return Err(format!("unknown oracle option {k:?}")),
                }
            }
            cfg.validate().map_err(|e| e.to_string())?;
            Ok(AdapterSpec::Oracle(cfg))
        }
        "cached" if !rest.is_empty() => Ok(AdapterSpec::Cached(PathBuf::from(rest))),
        "exec" if !rest.trim().is_empty() => Ok(AdapterSpec::Exec(rest.trim().to_string())),
        _ => Err(format!(
            "adapter {spec:?} is not oracle[:k=v,...], cached:<file> or exec:<command>"
        )),
    }
}

/// Expands `start:stop:step` to the inclusive list of factors.
pub fn parse_sweep(s: &str) -> Result<Vec<f64>, String> {
    let parts: Vec<&str> = s.split(':').collect();
    let [start, stop, step] = parts[..] else {
        return Err(format!("sweep {s:?} is not start:stop:step"));
    };
    let p = |x: &str| {
        x.trim()
            .parse::<f64>()
            .map_err(|_| format!("bad number {x:?} in sweep"))
    };
    let (start, stop, step) = (p(start)?, p(stop)?, p(step)?);
    if !(step > 0.0 && start >= 1.0 && stop >= start && stop.is_finite()) {
        return Err(format!("sweep {s:?} needs 1 <= start <= stop and step > 0"));
    }
    let n = ((stop - start) / step + 1e-9).floor() as usize + 1;
    Ok((0..n)
        .map(|i| ((start + i as f64 * step) * 1e9).round() / 1e9)
        .collect())
}

fn build_detector(
    spec: &AdapterSpec,
    a: &InferArgs,
    gt: &crate::cocodata::AnnotatedDataset,
) -> Result<Box<dyn Detector>, CliError> {
    Ok(match spec {
        AdapterSpec::Oracle(cfg) => Box::new(OracleDetector::new(gt, *cfg)?),
        AdapterSpec::Cached(p) => Box::new(CachedDetector::from_path(p)?),
        AdapterSpec::Exec(cmd) => {
            let mut d = flag(SubprocessDetector::from_template(cmd))?;
            if let Some(t) = a.adapter_timeout {
                if !(t > 0.0 && t.is_finite()) {
                    return Err(usage("--adapter-timeout must be positive"));
                }
                d = d.with_timeout(Duration::from_secs_f64(t));
            }
            if let Some(c) = a.adapter_concurrency {
                if c == 0 {
                    return Err(usage("--adapter-concurrency must be at least 1"));
                }
                d = d.with_concurrency(c);
            }
            Box::new(d.with_batch(a.adapter_batch.unwrap_or(false)))
        }
    })
}

fn alpha_label(alpha: f64, decimals: usize) -> String {
    format!("dets_alpha{alpha:.decimals$}.json")
}

pub(super) fn infer(ctx: &RunContext, a: InferArgs) -> CmdResult {
    let gt_path = req(&a.gt, "--gt")?;
    let out = req(&a.out, "--out")?;
    let spec_text = req(&a.adapter, "--adapter")?;
    let spec = parse_adapter(&spec_text).map_err(usage)?;
    let mode = a.mode.unwrap_or(InferMode::Uptest);
    let sweep = match &a.alpha_sweep {
        Some(s) => Some(parse_sweep(s).map_err(usage)?),
        None => None,
    };
    if mode == InferMode::Single && a.alpha.is_some() {
        warn!("--alpha has no effect in single mode; ignoring it");
    }
    if sweep.is_some() && mode != InferMode::Uptest {
        return Err(usage("--alpha-sweep requires --mode uptest"));
    }
    if sweep.is_some() && a.alpha.is_some() {
        return Err(usage("--alpha and --alpha-sweep are mutually exclusive"));
    }
    let d = UpTestConfig::default();
    let base = UpTestConfig {
        alpha: a.alpha.map_or(d.alpha, |r| r.0),
        small_gate_max: a.small_gate_max.unwrap_or(d.small_gate_max),
        large_gate_min: a.large_gate_min.unwrap_or(d.large_gate_min),
        gate_margin: a.gate_margin.unwrap_or(d.gate_margin),
        nms_iou: a.nms_iou.unwrap_or(d.nms_iou),
        score_floor: a.score_floor.unwrap_or(d.score_floor),
    };
    if sweep.is_none() && mode != InferMode::Single {
        flag(base.validate())?;
    }

    let gt = load_dataset(&gt_path)?;
    let detector = build_detector(&spec, &a, &gt)?;
    let root = a.images_root.as_deref();
    let mut inputs: Vec<&Path> = vec![&gt_path];
    if let Some(r) = root {
        inputs.push(r);
    }
    let seed = match &spec {
        AdapterSpec::Oracle(c) => Some(c.seed),
        _ => None,
    };
    let mut config = json!({
        "adapter": spec_text,
        "mode": mode,
        "up_test": base,
    });

    match sweep {
        None => {
            let set = match mode {
                InferMode::Single => run_single_pass(&*detector, &gt, root, base.score_floor)?,
                InferMode::Uptest => run_up_test(&*detector, &gt, root, &base)?,
                InferMode::Teacher => run_teacher(&*detector, &gt, root, &base)?,
            };
            ensure_parent(&out)?;
            save_detections(&set, &out)?;
            let m = ctx.manifest(config, seed, &inputs, &[&out]);
            write_json(&sidecar(&out, MANIFEST_SUFFIX), &m)
        }
        Some(alphas) => {
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let step_text = a
                .alpha_sweep
                .as_deref()
                .unwrap_or("")
                .rsplit(':')
                .next()
                .unwrap_or("");
            let decimals = step_text.split_once('.').map_or(0, |(_, f)| f.len()).max(2);
            let mut files = Vec::new();
            for &alpha in &alphas {
                // A factor of 1 has no second pass to gate; it is the single-pass run.
                let set = if alpha <= 1.0 {
                    run_single_pass(&*detector, &gt, root, base.score_floor)?
                } else {
                    let cfg = UpTestConfig { alpha, ..base };
                    flag(cfg.validate())?;
                    run_up_test(&*detector, &gt, root, &cfg)?
                };
                let path = out.join(alpha_label(alpha, decimals));
                save_detections(&set, &path)?;
                files.push(path);
            }
            config["alpha_sweep"] = json!(alphas);
            let outs: Vec<&Path> = files.iter().map(PathBuf::as_path).collect();
            let m = ctx.manifest(config, seed, &inputs, &outs);
            write_json(&out.join(DIR_MANIFEST), &m)
        }
    }
}

// ---------------------------------------------------------------------------
// Evaluation

fn is_manifest(p: &Path) -> bool {
    let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
    name == DIR_MANIFEST || name.ends_with(MANIFEST_SUFFIX)
}

fn json_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut files = Vec::new();
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in rd {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.is_file() && p.extension().is_some_and(|e| e == "json") && !is_manifest(&p) {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

pub(super) fn eval(ctx: &RunContext, a: EvalArgs) -> CmdResult {
    let gt_path = req(&a.gt, "--gt")?;
    let dets_path = req(&a.dets, "--dets")?;
    let out = req(&a.out, "--out")?;
    let d = EvalConfig::default();
    let cfg = EvalConfig {
        iou_thresholds: a.iou_thresholds.clone().unwrap_or(d.iou_thresholds),
        max_dets: a.max_dets.unwrap_or(d.max_dets),
        size_thresholds: thresholds(&a.size)?,
        recall_samples: a.recall_samples.unwrap_or(d.recall_samples),
        area_source: area_source(a.area_source),
    };
    flag(cfg.validate())?;
    let gt = load_dataset(&gt_path)?;

    let jobs: Vec<(PathBuf, PathBuf)> = if dets_path.is_dir() {
        let files = json_files(&dets_path)?;
        if files.is_empty() {
            return Err(CliError::Run(Error::InvalidArgument(format!(
                "{}: no detection files",
                dets_path.display()
            ))));
        }
        files
            .into_iter()
            .map(|f| {
                let stem = f.file_stem().unwrap_or_default().to_owned();
                (f, out.join(stem))
            })
            .collect()
    } else {
        vec![(dets_path.clone(), out.clone())]
    };

    let mut outputs = Vec::new();
    for (dets_file, dir) in &jobs {
        let dets = load_detections(dets_file)?;
        let report = evaluate(&gt, &dets, &cfg)?;
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let (rj, rc, pc) = (
            dir.join("report.json"),
            dir.join("report.csv"),
            dir.join("pr_curves.csv"),
        );
        write_json(&rj, &report)?;
        write_atomic(&rc, &report_csv(&report)?)?;
        write_atomic(&pc, &pr_curves_csv(&report)?)?;
        info!(
            "{}: AP {:.4} AP_S {:.4} AP_M {:.4} AP_L {:.4}",
            dets_file.display(),
            report.ap,
            report.ap_s,
            report.ap_m,
            report.ap_l
        );
        outputs.extend([rj, rc, pc]);
    }
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let outs: Vec<&Path> = outputs.iter().map(PathBuf::as_path).collect();
    let m = ctx.manifest(json!(cfg), None, &[&gt_path, &dets_path], &outs);
    write_json(&out.join(DIR_MANIFEST), &m)
}

pub(super) fn fixed_pr(ctx: &RunContext, a: FixedPrArgs) -> CmdResult {
    let gt_path = req(&a.gt, "--gt")?;
    let dets_path = req(&a.dets, "--dets")?;
    let ious = a.iou.clone().unwrap_or_else(|| vec![0.5, 0.7]);
    if ious.is_empty() {
        return Err(usage("--iou needs at least one threshold"));
    }
    let band = flag(SizeBand::parse(a.band.as_deref().unwrap_or("all")))?;
    let t = thresholds(&a.size)?;
    let source = area_source(a.area_source);
    let gt = load_dataset(&gt_path)?;
    let dets = load_detections(&dets_path)?;
    let mut points = Vec::with_capacity(ious.len());
    for &iou in &ious {
        points.push(flag(fixed_set_pr(&gt, &dets, iou, band, &t, source))?);
    }
    match &a.out {
        Some(out) => {
            write_json(out, &points)?;
            let cfg =
                json!({"iou": ious, "band": band, "size_thresholds": t, "area_source": source});
            let m = ctx.manifest(cfg, None, &[&gt_path, &dets_path], &[out]);
            write_json(&sidecar(out, MANIFEST_SUFFIX), &m)
        }
        None => {
            let text = serde_json::to_string_pretty(&points)
                .map_err(|e| Error::Serialize(e.to_string()))?;
            println!("{text}");
            Ok(())
        }
    }
}

pub(super) fn diff(ctx: &RunContext, a: DiffArgs) -> CmdResult {
    let gt_path = req(&a.gt, "--gt")?;
    let a_path = req(&a.a, "--a")?;
    let b_path = req(&a.b, "--b")?;
    let out = req(&a.out, "--out")?;
    let iou = a.iou.unwrap_or(0.5);
    let score = a.score.unwrap_or(0.5);
    let gt = load_dataset(&gt_path)?;
    let set_a = load_detections(&a_path)?;
    let set_b = load_detections(&b_path)?;
    let result = flag(diff_detections(&gt, &set_a, &set_b, iou, score))?;

    let count = |side: DiffSide, label: DiffLabel| {
        result
            .boxes
            .iter()
            .filter(|b| b.side == side && b.label == label)
            .count()
    };
    let summary = json!({
        "iou_threshold": iou,
        "score_threshold": score,
        "tp_both": result.count(DiffLabel::TpBoth) / 2,
        "tp_only_a": result.count(DiffLabel::TpOnlyA),
        "tp_only_b": result.count(DiffLabel::TpOnlyB),
        "fp_a": count(DiffSide::A, DiffLabel::Fp),
        "fp_b": count(DiffSide::B, DiffLabel::Fp),
        "boxes": result.boxes,
    });
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let diff_path = out.join("diff.json");
    write_json(&diff_path, &summary)?;
    let mut outputs = vec![diff_path];
    let mut inputs: Vec<&Path> = vec![&gt_path, &a_path, &b_path];
    if let Some(root) = &a.images_root {
        inputs.push(root);
        let dir = out.join("overlays");
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for img in &gt.images {
            if result.for_image(img.image_id).next().is_none() {
                continue;
            }
            let src = load_image(root.join(&img.file_name))?;
            let canvas = render_diff_overlay(&src, result.for_image(img.image_id))?;
            let path = dir.join(format!("{}.ppm", img.image_id));
            save_image(&canvas, &path)?;
            outputs.push(path);
        }
    }
    let outs: Vec<&Path> = outputs.iter().map(PathBuf::as_path).collect();
    let m = ctx.manifest(
        json!({"iou_threshold": iou, "score_threshold": score}),
        None,
        &inputs,
        &outs,
    );
    write_json(&out.join(DIR_MANIFEST), &m)
}

// ---------------------------------------------------------------------------
// Sweep report

const REPORT_METRICS: [&str; 4] = ["ap", "ap_s", "ap_m", "ap_l"];

fn walk_json(dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), CliError> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in rd {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.is_dir() {
            walk_json(&p, out)?;
        } else if p.extension().is_some_and(|e| e == "json") && !is_manifest(&p) {
            out.push(p);
        }
    }
    Ok(())
}

pub(super) fn report(ctx: &RunContext, a: ReportArgs) -> CmdResult {
    let sweep = req(&a.sweep, "--sweep")?;
    let mut files = Vec::new();
    walk_json(&sweep, &mut files)?;
    files.sort();
    let pattern = Regex::new(r"alpha[_=-]?([0-9]+(?:\.[0-9]+)?)").expect("static regex");

    let mut rows: BTreeMap<u64, (f64, [f64; 4], PathBuf)> = BTreeMap::new();
    let mut problems = Vec::new();
    for f in &files {
        let rel = f
            .strip_prefix(&sweep)
            .unwrap_or(f)
            .to_string_lossy()
            .into_owned();
        let Some(alpha) = pattern
            .captures_iter(&rel)
            .last()
            .and_then(|c| c[1].parse::<f64>().ok())
        else {
            continue;
        };
        let text = std::fs::read(f).map_err(|e| Error::io(f, e))?;
        let v: Value = match serde_json::from_slice(&text) {
            Ok(v) => v,
            Err(e) => {
                problems.push(format!("{}: {e}", f.display()));
                continue;
            }
        };
        // Detection files share the naming; only objects carrying metrics are reports.
        if v.is_array() {
            continue;
        }
        let mut vals = [0.0; 4];
        let mut missing = Vec::new();
        for (i, k) in REPORT_METRICS.iter().enumerate() {
            match v.get(k).and_then(Value::as_f64) {
                Some(x) => vals[i] = x,
                None => missing.push(*k),
            }
        }
        if !missing.is_empty() {
            problems.push(format!("{}: missing {}", f.display(), missing.join(", ")));
            continue;
        }
        if let Some((_, _, prev)) = rows.get(&alpha.to_bits()) {
            warn!(
                "duplicate alpha {alpha}: {} replaces {}",
                f.display(),
                prev.display()
            );
        }
        rows.insert(alpha.to_bits(), (alpha, vals, f.clone()));
    }
    if !problems.is_empty() {
        return Err(CliError::Run(Error::InvalidArgument(format!(
            "incomplete reports under {}: {}",
            sweep.display(),
            problems.join("; ")
        ))));
    }
    if rows.is_empty() {
        return Err(CliError::Run(Error::InvalidArgument(format!(
            "no per-alpha reports found under {}",
            sweep.display()
        ))));
    }
    let mut ordered: Vec<_> = rows.into_values().collect();
    ordered.sort_by(|x, y| x.0.total_cmp(&y.0));

    let mut w = csv::Writer::from_writer(Vec::new());
    let ser = |e: csv::Error| Error::Serialize(e.to_string());
    w.write_record(["alpha", "metric", "value"]).map_err(ser)?;
    for (alpha, vals, _) in &ordered {
        for (k, v) in REPORT_METRICS.iter().zip(vals) {
            w.write_record([alpha.to_string(), k.to_string(), v.to_string()])
                .map_err(ser)?;
        }
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Serialize(e.to_string()))?;
    match &a.out {
        Some(out) => {
            ensure_parent(out)?;
            write_atomic(out, &bytes)?;
            let sources: Vec<&Path> = ordered.iter().map(|r| r.2.as_path()).collect();
            let m = ctx.manifest(json!({"sweep": sweep}), None, &sources, &[out]);
            write_json(&sidecar(out, MANIFEST_SUFFIX), &m)
        }
        None => {
            use std::io::Write;
            std::io::stdout()
                .write_all(&bytes)
                .map_err(|e| Error::io("<stdout>", e))?;
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_spec_parses() {
        let AdapterSpec::Oracle(c) = parse_adapter("oracle:seed=7").unwrap() else {
            panic!("expected oracle");
        };
        assert_eq!(c.seed, 7);
        assert_eq!(c.recall_curve, RecallCurve::default());
        let AdapterSpec::Oracle(c) = parse_adapter("oracle:seed=3,identity,noise=0.1").unwrap()
        else {
            panic!("expected oracle");
        };
        assert_eq!(c.seed, 3);
        assert_eq!(c.recall_curve.small, 1.0);
        assert_eq!(c.localization_noise, 0.1);
        assert!(parse_adapter("oracle:small=2").is_err());
        assert!(parse_adapter("oracle:bogus=1").is_err());
    }

    #[test]
    fn other_specs_parse() {
        assert_eq!(
            parse_adapter("cached:/tmp/c.json").unwrap(),
            AdapterSpec::Cached("/tmp/c.json".into())
        );
        assert_eq!(
            parse_adapter("exec:python det.py --gpu 0").unwrap(),
            AdapterSpec::Exec("python det.py --gpu 0".into())
        );
        assert!(parse_adapter("cached:").is_err());
        assert!(parse_adapter("magic").is_err());
    }

    #[test]
    fn sweep_counts() {
        let v = parse_sweep("1.0:4.0:0.2").unwrap();
        assert_eq!(v.len(), 16);
        assert_eq!(v[0], 1.0);
        assert_eq!(v[5], 2.0);
        assert_eq!(v[15], 4.0);
        assert_eq!(parse_sweep("2:2:1").unwrap(), vec![2.0]);
        assert!(parse_sweep("0.5:2:0.5").is_err());
        assert!(parse_sweep("1:2").is_err());
    }

    #[test]
    fn sweep_file_names_are_distinct() {
        let v = parse_sweep("1.0:4.0:0.2").unwrap();
        let names: std::collections::BTreeSet<_> = v.iter().map(|&a| alpha_label(a, 2)).collect();
        assert_eq!(names.len(), 16);
        assert!(names.contains("dets_alpha2.20.json"));
    }
}
