//! Single-sample inference, region analysis and point-cloud export.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::dataset::{external_rel_path, load_split, relative_input, RelOptions, RelSource};
use super::train::train_config_from_metadata;
use crate::cloud::{backproject, clamp_depth, extract_object, ply_comments, write_cloud_csv, write_ply, PointCloud};
use crate::error::{Error, Result};
use crate::grid::{DepthMap, Grid};
use crate::io;
use crate::metrics::{evaluate_sample, EvalRegion, MetricsReport};
use crate::nn::checkpoint::load_checkpoint;
use crate::nn::{NetInputs, RemakeNet, Variant};
use crate::regions::{classify_regions, emit_region_report, region_stats, SampleRegionReport};
use crate::reldepth::{ingest_external_map, proxy_relative_depth};
use crate::scene::{read_sample_input, RegionLabel};

pub const PRED_DEPTH_FILE: &str = "depth_pred.png";
pub const OBJECT_PLY_FILE: &str = "object.ply";

#[derive(Debug, Clone, Default)]
pub struct InferOptions {
    /// External relative-depth map; overrides any map in the sample directory.
    pub rel_map: Option<PathBuf>,
    /// Overrides the variant stored in the checkpoint.
    pub variant: Option<Variant>,
}

#[derive(Debug, Clone)]
pub struct InferOutput {
    /// Completed depth clamped to `(0, z_max]`.
    pub depth: DepthMap,
    /// Present when the sample has ground truth.
    pub metrics: Option<MetricsReport>,
    pub object_points: usize,
    /// How the relative-depth input was obtained.
    pub rel_origin: String,
    pub warnings: Vec<String>,
}

/// Relative depth for inference: explicit external map, then a map stored in
/// the sample directory, then the proxy from ground truth, then the proxy from
/// raw depth.
fn inference_rel(
    sample_dir: &Path,
    gt: Option<&DepthMap>,
    raw: &DepthMap,
    seed: u64,
    opts: &InferOptions,
    trained: &RelOptions,
    warnings: &mut Vec<String>,
) -> Result<(Grid<f64>, String)> {
    let external = opts.rel_map.clone().or_else(|| external_rel_path(sample_dir));
    if let Some(path) = external {
        let map = ingest_external_map(&path, raw.shape())?;
        warnings.extend(map.warnings);
        return Ok((map.values, format!("external:{}", path.display())));
    }
    if trained.source == RelSource::External {
        warnings.push("model was trained on external relative depth but none was found; using a proxy".into());
    }
    if let Some(gt) = gt {
        let opts = RelOptions {
            source: RelSource::Proxy,
            noise: trained.noise,
        };
        return Ok((
            relative_input(sample_dir, gt, seed, &opts)?,
            "proxy:ground_truth".into(),
        ));
    }
    match proxy_relative_depth(raw, 0.0, seed) {
        Ok(map) => {
            warnings.push("no ground truth: relative depth derived from raw depth".into());
            Ok((map.values, "proxy:raw_depth".into()))
        }
        Err(_) => {
            warnings.push("no valid depth at all: neutral relative depth".into());
            Ok((Grid::filled(raw.height, raw.width, 0.5), "neutral".into()))
        }
    }
}

/// Completes one sample directory and writes `depth_pred.png`, `object.ply`,
/// `infer.json` and, with ground truth, an error heatmap and `metrics.json`.
pub fn infer(checkpoint: &Path, sample_dir: &Path, out_dir: &Path, opts: &InferOptions) -> Result<InferOutput> {
    let ckpt = load_checkpoint(checkpoint)?;
    let trained = train_config_from_metadata(&ckpt.metadata);
    let trained_rel = trained.as_ref().map(|t| t.rel).unwrap_or_default();
    let variant = opts
        .variant
        .or(trained.as_ref().map(|t| t.variant))
        .unwrap_or(Variant::Full);
    let net = RemakeNet::new(&ckpt.params.config)?;
    let input = read_sample_input(sample_dir)?;
    let want = (net.config().height, net.config().width);
    if input.depth_raw.shape() != want {
        return Err(Error::ShapeMismatch {
            what: "sample resolution vs model input".into(),
            expected: want,
            found: input.depth_raw.shape(),
        });
    }
    let mut warnings = Vec::new();
    let (rel, rel_origin) = inference_rel(
        sample_dir,
        input.depth_gt.as_ref(),
        &input.depth_raw,
        input.meta.seed,
        opts,
        &trained_rel,
        &mut warnings,
    )?;
    let inputs = NetInputs {
        rgb: &input.rgb,
        mask: &input.mask,
        rel: &rel,
        depth: &input.depth_raw,
    };
    let raw_pred = net.forward_variant(&inputs, &ckpt.params, variant)?;
    if raw_pred.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("prediction for {}", sample_dir.display())));
    }
    let z_max = net.config().z_max;
    let depth = clamp_depth(&raw_pred, z_max);
    io::write_depth_png(&out_dir.join(PRED_DEPTH_FILE), &depth)?;

    let metrics = match &input.depth_gt {
        Some(gt) => {
            let m = evaluate_sample(&depth, gt, &input.mask, EvalRegion::TransparentMask).ok();
            let map = classify_regions(&input.depth_raw, gt, &input.mask, crate::regions::DEFAULT_TAU)?;
            let stats = region_stats(&map, &depth, gt)?;
            emit_region_report(&[SampleRegionReport::new("sample", stats, &depth, gt)], out_dir)?;
            if let Some(m) = &m {
                io::write_json(&out_dir.join("metrics.json"), &m.to_json())?;
            }
            m
        }
        None => None,
    };

    let cloud = extract_object(&depth, &input.mask, &input.intrinsics, Some(&input.rgb))?;
    write_ply(
        &cloud,
        &out_dir.join(OBJECT_PLY_FILE),
        &ply_comments(&input.intrinsics, Some(z_max)),
    )?;
    io::write_json(
        &out_dir.join("infer.json"),
        &json!({
            "checkpoint": checkpoint.display().to_string(),
            "sample": sample_dir.display().to_string(),
            "variant": variant.name(),
            "relative_depth": rel_origin,
            "object_points": cloud.len(),
            "has_ground_truth": input.depth_gt.is_some(),
            "warnings": warnings,
        }),
    )?;
    Ok(InferOutput {
        depth,
        metrics,
        object_points: cloud.len(),
        rel_origin,
        warnings,
    })
}

/// Region composition of one sample as recovered from its depth maps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRegionSummary {
    pub sample_id: String,
    pub transparent_count: usize,
    pub fractions: BTreeMap<RegionLabel, f64>,
    /// Share of mask pixels whose recovered label equals the stored one.
    pub label_agreement: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionAnalysis {
    pub split: String,
    pub tau: f64,
    pub samples: Vec<SampleRegionSummary>,
    /// Pooled over all transparent pixels of the split.
    pub pooled_fractions: BTreeMap<RegionLabel, f64>,
}

/// Classifies regions for every sample of `split`, compares against stored
/// labels, and writes `region_summary.json` plus a raw-depth region error
/// report into `out_dir`.
pub fn analyze_regions(dataset: &Path, split: &str, tau: f64, out_dir: &Path) -> Result<RegionAnalysis> {
    let samples = load_split(dataset, split, &RelOptions::default())?;
    if samples.is_empty() {
        return Err(Error::EmptyRegion(format!("split {split:?} is empty")));
    }
    let mut summaries = Vec::with_capacity(samples.len());
    let mut reports = Vec::with_capacity(samples.len());
    let mut pooled: BTreeMap<RegionLabel, usize> = BTreeMap::new();
    let mut pooled_total = 0usize;
    for s in &samples {
        let map = classify_regions(&s.depth_raw, &s.depth_gt, &s.mask, tau)?;
        let stats = region_stats(&map, &s.depth_raw, &s.depth_gt)?;
        let agreement = s.regions.as_ref().map(|stored| {
            let (mut same, mut n) = (0usize, 0usize);
            for (i, &m) in s.mask.data.iter().enumerate() {
                if m == 1 {
                    n += 1;
                    same += (stored.data[i] == map.labels.data[i]) as usize;
                }
            }
            if n == 0 {
                1.0
            } else {
                same as f64 / n as f64
            }
        });
        for label in RegionLabel::TRANSPARENT {
            *pooled.entry(label).or_default() += stats.get(label).pixel_count;
        }
        pooled_total += stats.transparent_count;
        summaries.push(SampleRegionSummary {
            sample_id: s.id.clone(),
            transparent_count: stats.transparent_count,
            fractions: RegionLabel::TRANSPARENT
                .into_iter()
                .map(|l| (l, stats.get(l).fraction))
                .collect(),
            label_agreement: agreement,
        });
        reports.push(SampleRegionReport::new(s.id.clone(), stats, &s.depth_raw, &s.depth_gt));
    }
    let analysis = RegionAnalysis {
        split: split.to_string(),
        tau,
        samples: summaries,
        pooled_fractions: pooled
            .into_iter()
            .map(|(l, c)| {
                (
                    l,
                    if pooled_total == 0 {
                        0.0
                    } else {
                        c as f64 / pooled_total as f64
                    },
                )
            })
            .collect(),
    };
    emit_region_report(&reports, out_dir)?;
    io::write_json(&out_dir.join("region_summary.json"), &analysis)?;
    Ok(analysis)
}

/// Which depth map a cloud is lifted from.
#[derive(Debug, Clone, PartialEq)]
pub enum CloudDepth {
    GroundTruth,
    Raw,
    /// A 16-bit depth PNG, e.g. `depth_pred.png` from inference.
    File(PathBuf),
}

/// Backprojects a sample to PLY (or CSV when `out` ends in `.csv`). With
/// `object_only`, only mask pixels are kept.
pub fn export_cloud(sample_dir: &Path, depth: &CloudDepth, object_only: bool, out: &Path) -> Result<PointCloud> {
    let input = read_sample_input(sample_dir)?;
    let z_max = input.meta.z_max;
    let depth = match depth {
        CloudDepth::GroundTruth => input
            .depth_gt
            .clone()
            .ok_or_else(|| Error::MissingGroundTruth(sample_dir.join("depth_gt.png")))?,
        CloudDepth::Raw => input.depth_raw.clone(),
        CloudDepth::File(p) => io::read_depth_png(p)?,
    };
    let depth = clamp_depth(&depth, z_max);
    let cloud = if object_only {
        extract_object(&depth, &input.mask, &input.intrinsics, Some(&input.rgb))?
    } else {
        backproject(&depth, &input.intrinsics, Some(&input.rgb))?
    };
    if out.extension().is_some_and(|e| e == "csv") {
        write_cloud_csv(&cloud, out)?;
    } else {
        write_ply(&cloud, out, &ply_comments(&input.intrinsics, Some(z_max)))?;
    }
    Ok(cloud)
}
