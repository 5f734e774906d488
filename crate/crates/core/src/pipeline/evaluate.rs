//! Metric evaluation of a prediction source over a dataset split.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde_json::{json, Map, Value};

use super::dataset::{load_split, LoadedSample, RelOptions};
use super::train::train_config_from_metadata;
use crate::cloud::clamp_depth;
use crate::error::{Error, Result};
use crate::grid::DepthMap;
use crate::io;
use crate::metrics::{evaluate_sample, metrics_by_region, EvalRegion, MetricsReport};
use crate::nn::checkpoint::load_checkpoint;
use crate::nn::{ModelParams, NetInputs, RemakeNet, Variant};
use crate::regions::{classify_regions, emit_region_report, region_stats, SampleRegionReport, DEFAULT_TAU};
use crate::scene::RegionLabel;

pub const METRICS_FILE: &str = "metrics.json";
pub const PER_SAMPLE_CSV: &str = "per_sample.csv";

/// What is scored against ground truth.
#[derive(Debug, Clone, PartialEq)]
pub enum PredictionSource {
    Checkpoint(PathBuf),
    /// Ground truth itself (zero-error oracle).
    GroundTruth,
    /// The raw sensor depth.
    RawDepth,
}

impl PredictionSource {
    pub fn describe(&self) -> String {
        match self {
            PredictionSource::Checkpoint(p) => format!("checkpoint:{}", p.display()),
            PredictionSource::GroundTruth => "ground_truth".into(),
            PredictionSource::RawDepth => "raw_depth".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub split: String,
    pub region: EvalRegion,
    pub variant: Variant,
    pub rel: RelOptions,
    /// Refraction threshold for the region breakdown, meters.
    pub tau: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            split: "test".into(),
            region: EvalRegion::TransparentMask,
            variant: Variant::Full,
            rel: RelOptions::default(),
            tau: DEFAULT_TAU,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SampleEval {
    pub id: String,
    pub metrics: MetricsReport,
    pub by_region: BTreeMap<RegionLabel, MetricsReport>,
    pub region_report: SampleRegionReport,
}

#[derive(Debug, Clone)]
pub struct EvalOutput {
    pub source: String,
    pub split: String,
    pub variant: Variant,
    /// Mean of the per-sample reports.
    pub aggregate: MetricsReport,
    /// Per region, mean over the samples where the region is present.
    pub region_aggregate: BTreeMap<RegionLabel, MetricsReport>,
    pub samples: Vec<SampleEval>,
}

impl EvalOutput {
    pub fn to_json(&self) -> Value {
        let regions: Map<String, Value> = self
            .region_aggregate
            .iter()
            .map(|(l, r)| (l.name().to_string(), r.to_json()))
            .collect();
        let samples: Vec<Value> = self
            .samples
            .iter()
            .map(|s| {
                let mut m = s.metrics.to_json();
                m.as_object_mut()
                    .expect("object")
                    .insert("sample_id".into(), s.id.clone().into());
                m
            })
            .collect();
        json!({
            "source": self.source,
            "split": self.split,
            "variant": self.variant.name(),
            "aggregate": self.aggregate.to_json(),
            "regions": regions,
            "samples": samples,
        })
    }

    pub fn per_sample_csv(&self) -> String {
        let mut s = String::from("sample_id,rmse_m,rel,mae_m");
        for d in &self.aggregate.delta {
            write!(s, ",{}", crate::metrics::delta_key(d.threshold)).unwrap();
        }
        s.push_str(",pixel_count\n");
        for e in &self.samples {
            let m = &e.metrics;
            write!(s, "{},{},{},{}", e.id, m.rmse, m.rel, m.mae).unwrap();
            for d in &m.delta {
                write!(s, ",{}", d.percent).unwrap();
            }
            writeln!(s, ",{}", m.pixel_count).unwrap();
        }
        s
    }

    /// Writes `metrics.json`, `per_sample.csv` and the region report.
    pub fn write(&self, dir: &Path) -> Result<()> {
        io::write_json(&dir.join(METRICS_FILE), &self.to_json())?;
        io::atomic_write(&dir.join(PER_SAMPLE_CSV), self.per_sample_csv().as_bytes())?;
        let reports: Vec<SampleRegionReport> = self.samples.iter().map(|s| s.region_report.clone()).collect();
        emit_region_report(&reports, &dir.join("regions"))
    }
}

/// Scores `predict` on every sample.
pub fn evaluate_predictions<F>(
    samples: &[LoadedSample],
    opts: &EvalOptions,
    source: String,
    mut predict: F,
) -> Result<EvalOutput>
where
    F: FnMut(&LoadedSample) -> Result<DepthMap>,
{
    if samples.is_empty() {
        return Err(Error::EmptyRegion(format!("split {:?} is empty", opts.split)));
    }
    let mut evals = Vec::with_capacity(samples.len());
    for s in samples {
        let pred = predict(s)?;
        let metrics = evaluate_sample(&pred, &s.depth_gt, &s.mask, opts.region)
            .map_err(|e| Error::InvalidInput(format!("sample {}: {e}", s.id)))?;
        let map = classify_regions(&s.depth_raw, &s.depth_gt, &s.mask, opts.tau)?;
        let by_region = metrics_by_region(&pred, &s.depth_gt, &map)?;
        let stats = region_stats(&map, &pred, &s.depth_gt)?;
        evals.push(SampleEval {
            id: s.id.clone(),
            metrics,
            by_region,
            region_report: SampleRegionReport::new(s.id.clone(), stats, &pred, &s.depth_gt),
        });
    }
    let per: Vec<MetricsReport> = evals.iter().map(|e| e.metrics.clone()).collect();
    let mut region_aggregate = BTreeMap::new();
    for label in RegionLabel::TRANSPARENT {
        let present: Vec<MetricsReport> = evals.iter().filter_map(|e| e.by_region.get(&label).cloned()).collect();
        if !present.is_empty() {
            region_aggregate.insert(label, MetricsReport::mean(&present)?);
        }
    }
    Ok(EvalOutput {
        source,
        split: opts.split.clone(),
        variant: opts.variant,
        aggregate: MetricsReport::mean(&per)?,
        region_aggregate,
        samples: evals,
    })
}

/// Network prediction for a loaded sample, clamped to `(0, z_max]`.
pub fn predict_sample(net: &RemakeNet, params: &ModelParams, s: &LoadedSample, variant: Variant) -> Result<DepthMap> {
    let inputs = NetInputs {
        rgb: &s.rgb,
        mask: &s.mask,
        rel: &s.rel,
        depth: &s.depth_raw,
    };
    let pred = net.forward_variant(&inputs, params, variant)?;
    if pred.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("prediction for sample {}", s.id)));
    }
    Ok(clamp_depth(&pred, net.config().z_max))
}

pub fn evaluate_params(params: &ModelParams, samples: &[LoadedSample], opts: &EvalOptions) -> Result<EvalOutput> {
    let net = RemakeNet::new(&params.config)?;
    net.check_params(params)?;
    if let Some(s) = samples.first() {
        let want = (params.config.height, params.config.width);
        if s.depth_gt.shape() != want {
            return Err(Error::ShapeMismatch {
                what: "dataset resolution vs model input".into(),
                expected: want,
                found: s.depth_gt.shape(),
            });
        }
    }
    evaluate_predictions(samples, opts, "parameters".into(), |s| {
        predict_sample(&net, params, s, opts.variant)
    })
}

/// Loads the split and scores `source` on it. For checkpoints, relative-depth
/// options and the variant default to what the checkpoint was trained with
/// unless `override_training` is set.
pub fn evaluate(
    source: &PredictionSource,
    dataset: &Path,
    opts: &EvalOptions,
    override_training: bool,
) -> Result<EvalOutput> {
    match source {
        PredictionSource::Checkpoint(path) => {
            let ckpt = load_checkpoint(path)?;
            let mut opts = opts.clone();
            if !override_training {
                if let Some(tc) = train_config_from_metadata(&ckpt.metadata) {
                    opts.rel = tc.rel;
                    opts.variant = tc.variant;
                }
            }
            let samples = load_split(dataset, &opts.split, &opts.rel)?;
            let mut out = evaluate_params(&ckpt.params, &samples, &opts)?;
            out.source = source.describe();
            Ok(out)
        }
        PredictionSource::GroundTruth | PredictionSource::RawDepth => {
            let samples = load_split(dataset, &opts.split, &opts.rel)?;
            let raw = *source == PredictionSource::RawDepth;
            evaluate_predictions(&samples, opts, source.describe(), |s| {
                Ok(if raw { s.depth_raw.clone() } else { s.depth_gt.clone() })
            })
        }
    }
}
