//! End-to-end acceptance checks. Runs without the libtest harness so every
//! check prints exactly one PASS/FAIL line; exits nonzero if any fails.

use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use remake_core::cloud::{backproject, extract_object, project};
use remake_core::grid::Grid;
use remake_core::metrics::{compute_metrics, global_l1, masked_l1, LossKind, DELTA_THRESHOLDS};
use remake_core::nn::gradcheck::check_gradients;
use remake_core::nn::{ModelConfig, Variant};
use remake_core::pipeline::evaluate::METRICS_FILE;
use remake_core::pipeline::*;
use remake_core::regions::{classify_regions, DEFAULT_TAU};
use remake_core::reldepth::proxy_relative_depth;
use remake_core::scene::{
    generate_scene, read_sample, write_sample, BackgroundPlane, CameraIntrinsics, Primitive, RegionLabel, RegionRatios,
    SceneSpec, Shape,
};
use remake_core::{DepthMap, Mask};

/// Shift-benchmark seeds and the training length used for each.
const SHIFT_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const SHIFT_EPOCHS: usize = 100;
const SHIFT_DECAY_PERIOD: usize = 70;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

type Check = fn(&Path) -> Outcome;

fn main() {
    let checks: [(&str, Duration, Check); 10] = [
        (
            "metrics match brute-force reference",
            Duration::from_secs(10),
            metrics_reference,
        ),
        ("delta threshold is strict", Duration::from_secs(1), delta_boundary),
        (
            "analytic gradients match finite differences",
            Duration::from_secs(120),
            gradients,
        ),
        (
            "desk preset overfits and beats raw depth",
            Duration::from_secs(600),
            desk_overfit,
        ),
        (
            "shift benchmark ablation ordering",
            Duration::from_secs(90 * 60),
            shift_benchmark,
        ),
        (
            "region classifier recovers generator labels",
            Duration::from_secs(60),
            region_round_trip,
        ),
        (
            "proxy relative depth is affine invariant",
            Duration::from_secs(30),
            proxy_affine,
        ),
        (
            "point clouds reproject and hit analytic surfaces",
            Duration::from_secs(30),
            cloud_geometry,
        ),
        (
            "global and mask losses agree on full masks",
            Duration::from_secs(300),
            loss_equivalence,
        ),
        (
            "train and evaluate are byte-reproducible",
            Duration::from_secs(600),
            reproducibility,
        ),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let root = tempfile::tempdir().expect("temp dir");
    let mut failed = 0;
    for (i, (name, budget, check)) in checks.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let dir = root.path().join(format!("check{}", i + 1));
        std::fs::create_dir_all(&dir).unwrap();
        let start = Instant::now();
        let result = std::panic::catch_unwind(|| check(&dir)).unwrap_or_else(|_| outcome(false, "panicked"));
        let elapsed = start.elapsed();
        let in_time = elapsed <= *budget;
        let pass = result.pass && in_time;
        if !pass {
            failed += 1;
        }
        println!(
            "{} [{:>2}] {name}: {} ({:.1}s of {}s{})",
            if pass { "PASS" } else { "FAIL" },
            i + 1,
            result.detail,
            elapsed.as_secs_f64(),
            budget.as_secs(),
            if in_time { "" } else { ", over budget" }
        );
    }
    println!("acceptance: {failed} failed");
    if failed > 0 {
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------------------

/// Reference metrics computed pixel by pixel with no shared code.
fn reference_metrics(pred: &DepthMap, gt: &DepthMap, mask: &Mask) -> Vec<f64> {
    let pairs: Vec<(f64, f64)> = (0..gt.len())
        .filter(|&i| mask.data[i] == 1 && gt.data[i] > 0.0)
        .map(|i| (pred.data[i], gt.data[i]))
        .collect();
    let n = pairs.len() as f64;
    let mut out = vec![
        (pairs.iter().map(|(d, g)| (d - g) * (d - g)).sum::<f64>() / n).sqrt(),
        pairs.iter().map(|(d, g)| (d - g).abs() / g).sum::<f64>() / n,
        pairs.iter().map(|(d, g)| (d - g).abs()).sum::<f64>() / n,
    ];
    for t in DELTA_THRESHOLDS {
        let hits = pairs.iter().filter(|(d, g)| *d > 0.0 && d / g < t && g / d < t).count();
        out.push(100.0 * hits as f64 / n);
    }
    out
}

fn metrics_reference(_: &Path) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut worst = 0.0f64;
    let pairs = 128;
    for _ in 0..pairs {
        let gt = Grid::from_fn(16, 16, |_, _| {
            if rng.gen_bool(0.1) {
                0.0
            } else {
                rng.gen_range(0.2..2.0)
            }
        });
        let pred = gt.map(|&g| match rng.gen_range(0..10) {
            0 => 0.0,
            1 => -0.1,
            2 => g * 1.004,
            _ => g + rng.gen_range(-0.3..0.3),
        });
        let mask = Grid::from_fn(16, 16, |_, _| u8::from(rng.gen_bool(0.7)));
        let got = compute_metrics(&pred, &gt, &mask, &DELTA_THRESHOLDS, "mask").unwrap();
        let mut values = vec![got.rmse, got.rel, got.mae];
        values.extend(got.delta.iter().map(|d| d.percent));
        for (a, b) in values.iter().zip(reference_metrics(&pred, &gt, &mask)) {
            worst = worst.max((a - b).abs() / b.abs().max(1e-300));
        }
    }
    outcome(
        worst <= 1e-9,
        format!("max relative deviation {worst:.2e} over {pairs} pairs"),
    )
}

fn delta_boundary(_: &Path) -> Outcome {
    let score = |pred: f64, gt: f64| {
        let p = Grid::filled(1, 1, pred);
        let g = Grid::filled(1, 1, gt);
        let m = Grid::filled(1, 1, 1u8);
        compute_metrics(&p, &g, &m, &[1.01], "mask").unwrap().delta[0].percent
    };
    let inside = score(0.5049, 0.5);
    let outside = score(0.5051, 0.5);
    let exact = score(1.01, 1.0);
    outcome(
        inside == 100.0 && outside == 0.0 && exact == 0.0,
        format!("0.5049 -> {inside}%, 0.5051 -> {outside}%, exact ratio -> {exact}%"),
    )
}

fn gradient_config() -> ModelConfig {
    ModelConfig {
        height: 16,
        width: 16,
        ..ModelConfig::default()
    }
}

fn gradients(_: &Path) -> Outcome {
    let mut worst = (0.0f64, String::new());
    let mut groups = 0;
    for seed in 0..3 {
        match check_gradients(&gradient_config(), seed, 4, 1e-5) {
            Ok(report) => {
                groups += report.len();
                for g in report {
                    if g.rel_error > worst.0 {
                        worst = (g.rel_error, g.name);
                    }
                }
            }
            Err(e) => return outcome(false, e.to_string()),
        }
    }
    outcome(
        worst.0 < 1e-4,
        format!(
            "worst relative error {:.2e} ({}) over {groups} groups, 3 seeds",
            worst.0, worst.1
        ),
    )
}

fn desk_overfit(dir: &Path) -> Outcome {
    let run = || -> remake_core::Result<Outcome> {
        let data = dir.join("data");
        build_dataset(&DatasetSpec::default(), &data, 10, 0)?;
        let config = TrainConfig {
            dataset: data.clone(),
            output_dir: dir.join("run"),
            ..TrainConfig::desk()
        };
        let out = train(&config)?;
        let first = out.manifest.epochs[0].train_loss;
        let last = out.manifest.epochs.last().unwrap().train_loss;
        let opts = EvalOptions {
            split: config.train_split.clone(),
            ..EvalOptions::default()
        };
        let net = evaluate(
            &PredictionSource::Checkpoint(out.checkpoint.clone()),
            &data,
            &opts,
            false,
        )?;
        let raw = evaluate(&PredictionSource::RawDepth, &data, &opts, false)?;
        let ratio = last / first;
        Ok(outcome(
            ratio < 0.2 && net.aggregate.rmse < raw.aggregate.rmse,
            format!(
                "train L1 {first:.4} -> {last:.4} ({:.1}%), masked RMSE {:.4} m vs raw {:.4} m",
                100.0 * ratio,
                net.aggregate.rmse,
                raw.aggregate.rmse
            ),
        ))
    };
    run().unwrap_or_else(|e| outcome(false, e.to_string()))
}

fn shift_benchmark(dir: &Path) -> Outcome {
    let mut full_beats_blank = 0;
    let mut trans_depth_helps = 0;
    let mut rows = Vec::new();
    for seed in SHIFT_SEEDS {
        let data = dir.join(format!("data{seed}"));
        let result = build_shift_benchmark(&ShiftBenchmarkSpec::default(), &data, seed).and_then(|_| {
            let base = TrainConfig {
                dataset: data.clone(),
                epochs: SHIFT_EPOCHS,
                decay_period: SHIFT_DECAY_PERIOD,
                seed,
                ..TrainConfig::desk()
            };
            ablate(&base, &dir.join(format!("ablation{seed}")))
        });
        let table = match result {
            Ok(t) => t,
            Err(e) => return outcome(false, format!("seed {seed}: {e}")),
        };
        let rmse = |v: Variant| table.row(v).map(|r| r.metrics.rmse).unwrap_or(f64::NAN);
        let (full, blank, ntd) = (rmse(Variant::Full), rmse(Variant::Blank), rmse(Variant::NoTransDepth));
        full_beats_blank += usize::from(full < blank);
        trans_depth_helps += usize::from(ntd > full);
        rows.push(format!(
            "s{seed} full {full:.4} blank {blank:.4} no-trans-depth {ntd:.4}"
        ));
    }
    outcome(
        full_beats_blank >= 4 && trans_depth_helps >= 3,
        format!(
            "full<blank {full_beats_blank}/5, no-trans-depth>full {trans_depth_helps}/5 [{}]",
            rows.join("; ")
        ),
    )
}

fn region_round_trip(_: &Path) -> Outcome {
    let spec = DatasetSpec {
        height: 64,
        width: 64,
        ..DatasetSpec::default()
    };
    let (mut disagreements, mut worst) = (0usize, 0.0f64);
    for seed in 0..20 {
        let sample = match spec.generate(seed) {
            Ok(s) => s,
            Err(e) => return outcome(false, format!("scene {seed}: {e}")),
        };
        let map = classify_regions(&sample.depth_raw, &sample.depth_gt, &sample.mask, DEFAULT_TAU).unwrap();
        disagreements += map
            .labels
            .data
            .iter()
            .zip(&sample.region_labels.data)
            .filter(|(a, b)| a != b)
            .count();
        let n = sample.mask.data.iter().filter(|&&m| m == 1).count() as f64;
        for label in RegionLabel::TRANSPARENT {
            let got = map.labels.data.iter().filter(|&&l| l == label).count() as f64 / n;
            worst = worst.max((got - RegionRatios::TRANSCG.get(label)).abs());
        }
    }
    outcome(
        disagreements == 0 && worst <= 0.05,
        format!("{disagreements} label disagreements over 20 scenes, worst fraction error {worst:.4}"),
    )
}

fn proxy_affine(_: &Path) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for trial in 0..50 {
        let gt = Grid::from_fn(24, 24, |_, _| {
            if rng.gen_bool(0.05) {
                0.0
            } else {
                rng.gen_range(0.3..2.5)
            }
        });
        let a = rng.gen_range(0.1..10.0);
        let b = rng.gen_range(0.0..5.0);
        let scaled = gt.map(|&d| if d > 0.0 { a * d + b } else { 0.0 });
        let p = proxy_relative_depth(&gt, 0.0, trial).unwrap().values;
        let q = proxy_relative_depth(&scaled, 0.0, trial).unwrap().values;
        for (x, y) in p.data.iter().zip(&q.data) {
            worst = worst.max((x - y).abs());
        }
    }
    outcome(worst <= 1e-12, format!("max deviation {worst:.2e} over 50 affine maps"))
}

fn cloud_geometry(_: &Path) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let intr = CameraIntrinsics {
        fx: 61.3,
        fy: 58.9,
        cx: 20.4,
        cy: 14.7,
        width: 40,
        height: 30,
    };
    let depth = Grid::from_fn(30, 40, |_, _| rng.gen_range(0.1..3.0));
    let cloud = backproject(&depth, &intr, None).unwrap();
    let mut reproj = 0.0f64;
    for (p, [u, v]) in cloud.points.iter().zip(&cloud.pixels) {
        let (pu, pv, z) = project(*p, &intr);
        reproj = reproj.max((pu - *u as f64).abs()).max((pv - *v as f64).abs());
        reproj = reproj.max((z - depth.at(*v, *u)).abs());
    }

    let (center, radius) = ([0.02, -0.01, 0.5], 0.1);
    let spec = SceneSpec {
        height: 64,
        width: 64,
        intrinsics: None,
        primitives: vec![Primitive {
            shape: Shape::Sphere { radius },
            center,
            rotation_deg: [0.0; 3],
            transparent: true,
            color: [0.8, 0.8, 0.9],
        }],
        background: BackgroundPlane {
            depth: 1.0,
            tilt_deg: [0.0, 0.0],
            color_a: [0.2; 3],
            color_b: [0.7; 3],
            texture_scale: 6.0,
        },
        ratios: RegionRatios::TRANSCG,
        distortion_amplitude: 0.05,
        min_refraction_offset: 0.002,
        transparent_alpha: 0.25,
        region_scale: None,
        z_max: 3.0,
        seed: 11,
    };
    let sample = match generate_scene(&spec) {
        Ok(s) => s,
        Err(e) => return outcome(false, e.to_string()),
    };
    let object = extract_object(&sample.depth_gt, &sample.mask, &sample.intrinsics, None).unwrap();
    let surface = object
        .points
        .iter()
        .map(|p| {
            let d = [p[0] - center[0], p[1] - center[1], p[2] - center[2]];
            ((d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt() - radius).abs()
        })
        .fold(0.0f64, f64::max);
    outcome(
        reproj <= 1e-9 && surface <= 1e-6 && object.len() > 100,
        format!(
            "reprojection error {reproj:.2e} px over {} points, sphere surface error {surface:.2e} m over {} points",
            cloud.len(),
            object.len()
        ),
    )
}

fn loss_equivalence(dir: &Path) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let gt = Grid::from_fn(20, 20, |_, _| {
            if rng.gen_bool(0.1) {
                0.0
            } else {
                rng.gen_range(0.2..2.0)
            }
        });
        let pred = Grid::from_fn(20, 20, |_, _| rng.gen_range(0.0..2.5));
        let ones = Grid::filled(20, 20, 1u8);
        worst = worst.max((masked_l1(&pred, &gt, &ones).unwrap() - global_l1(&pred, &gt).unwrap()).abs());
    }

    let run = || -> remake_core::Result<(bool, usize)> {
        let data = dir.join("data");
        let index = build_dataset(&DatasetSpec::default(), &data, 10, 12)?;
        for ids in index.splits.values() {
            for id in ids {
                let mut s = read_sample(&data.join(id))?;
                s.mask = s.mask.map(|_| 1);
                s.region_labels = classify_regions(&s.depth_raw, &s.depth_gt, &s.mask, DEFAULT_TAU)?.labels;
                write_sample(&s, &data.join(id))?;
            }
        }
        let base = TrainConfig {
            dataset: data.clone(),
            epochs: 20,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let global = train(&TrainConfig {
            output_dir: dir.join("global"),
            loss: LossKind::Global,
            ..base.clone()
        })?;
        let masked = train(&TrainConfig {
            output_dir: dir.join("mask"),
            loss: LossKind::Mask,
            ..base
        })?;
        let trace = |m: &RunManifest| m.epochs.iter().map(|e| (e.train_loss, e.val_loss)).collect::<Vec<_>>();
        Ok((
            trace(&global.manifest) == trace(&masked.manifest),
            global.manifest.epochs.len(),
        ))
    };
    match run() {
        Ok((same, epochs)) => outcome(
            worst == 0.0 && same,
            format!(
                "loss difference {worst:.1e} over 50 maps, {epochs}-epoch traces {}",
                if same { "identical" } else { "differ" }
            ),
        ),
        Err(e) => outcome(false, e.to_string()),
    }
}

fn reproducibility(dir: &Path) -> Outcome {
    let data = dir.join("data");
    let config = TrainConfig {
        dataset: data.clone(),
        output_dir: dir.join("run"),
        epochs: 20,
        ..TrainConfig::desk()
    };
    let run = || -> remake_core::Result<Vec<u8>> {
        let out = train(&config)?;
        let eval = evaluate(
            &PredictionSource::Checkpoint(out.checkpoint),
            &data,
            &EvalOptions::default(),
            false,
        )?;
        let eval_dir = dir.join("eval");
        eval.write(&eval_dir)?;
        Ok(std::fs::read(eval_dir.join(METRICS_FILE)).unwrap())
    };
    let result = build_dataset(&DatasetSpec::default(), &data, 10, 21).and_then(|_| Ok((run()?, run()?)));
    match result {
        Ok((a, b)) => outcome(a == b, format!("metrics JSON {} bytes, identical: {}", a.len(), a == b)),
        Err(e) => outcome(false, e.to_string()),
    }
}
