//! L1 training losses and depth evaluation metrics.
//!
//! Every loss and metric ignores pixels whose ground truth is 0 (invalid).

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::grid::{ensure_same_shape, DepthMap, Mask};
use crate::regions::RegionMap;
use crate::scene::RegionLabel;

pub const DELTA_THRESHOLDS: [f64; 5] = [1.01, 1.03, 1.05, 1.10, 1.25];

/// Pixels a metric is computed over, always intersected with `gt > 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EvalRegion {
    #[default]
    TransparentMask,
    AllValid,
}

impl EvalRegion {
    pub fn name(self) -> &'static str {
        match self {
            EvalRegion::TransparentMask => "transparent_mask",
            EvalRegion::AllValid => "all_valid",
        }
    }

    /// Selection mask for a sample.
    pub fn select(self, mask: &Mask) -> Mask {
        match self {
            EvalRegion::TransparentMask => mask.clone(),
            EvalRegion::AllValid => mask.map(|_| 1),
        }
    }
}

impl FromStr for EvalRegion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mask" | "transparent_mask" => Ok(EvalRegion::TransparentMask),
            "all" | "all_valid" => Ok(EvalRegion::AllValid),
            other => Err(Error::Config(format!(
                "unknown eval region {other:?} (expected mask|all)"
            ))),
        }
    }
}

/// Loss supervision regime.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    Global,
    Mask,
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(LossKind::Global),
            "mask" => Ok(LossKind::Mask),
            other => Err(Error::Config(format!("unknown loss {other:?} (expected global|mask)"))),
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Global => "global",
            LossKind::Mask => "mask",
        })
    }
}

/// Mean absolute error over `select ∧ gt > 0` and its gradient w.r.t. `pred`.
/// The gradient uses `sign(0) = 0`.
fn l1_with_grad(pred: &DepthMap, gt: &DepthMap, select: Option<&Mask>) -> Result<(f64, Vec<f64>)> {
    ensure_same_shape("depth_gt", pred.shape(), gt.shape())?;
    if let Some(m) = select {
        ensure_same_shape("mask", pred.shape(), m.shape())?;
    }
    let keep = |i: usize| gt.data[i] > 0.0 && select.is_none_or(|m| m.data[i] == 1);
    let count = (0..pred.len()).filter(|&i| keep(i)).count();
    if count == 0 {
        return Err(Error::EmptyRegion(
            if select.is_some() {
                "no masked pixels with valid ground truth"
            } else {
                "no pixels with valid ground truth"
            }
            .into(),
        ));
    }
    let n = count as f64;
    let mut sum = 0.0;
    let mut grad = vec![0.0; pred.len()];
    for (i, g) in grad.iter_mut().enumerate() {
        if keep(i) {
            let d = pred.data[i] - gt.data[i];
            sum += d.abs();
            *g = if d > 0.0 {
                1.0 / n
            } else if d < 0.0 {
                -1.0 / n
            } else {
                0.0
            };
        }
    }
    Ok((sum / n, grad))
}

pub fn masked_l1(pred: &DepthMap, gt: &DepthMap, mask: &Mask) -> Result<f64> {
    Ok(l1_with_grad(pred, gt, Some(mask))?.0)
}

pub fn global_l1(pred: &DepthMap, gt: &DepthMap) -> Result<f64> {
    Ok(l1_with_grad(pred, gt, None)?.0)
}

/// Training loss under `kind` together with its gradient.
pub fn loss_with_grad(kind: LossKind, pred: &DepthMap, gt: &DepthMap, mask: &Mask) -> Result<(f64, Vec<f64>)> {
    match kind {
        LossKind::Global => l1_with_grad(pred, gt, None),
        LossKind::Mask => l1_with_grad(pred, gt, Some(mask)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeltaScore {
    pub threshold: f64,
    /// Percentage in `[0, 100]`.
    pub percent: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub rmse: f64,
    pub rel: f64,
    pub mae: f64,
    pub delta: Vec<DeltaScore>,
    pub eval_region: String,
    pub pixel_count: usize,
}

/// JSON key for a δ threshold: `1.05` → `delta_1_05`.
pub fn delta_key(threshold: f64) -> String {
    format!("delta_{threshold:.2}").replace('.', "_")
}

impl MetricsReport {
    pub fn delta_at(&self, threshold: f64) -> Option<f64> {
        self.delta.iter().find(|d| d.threshold == threshold).map(|d| d.percent)
    }

    pub fn to_json(&self) -> Value {
        let mut map = Map::new();
        map.insert("rmse_m".into(), self.rmse.into());
        map.insert("rel".into(), self.rel.into());
        map.insert("mae_m".into(), self.mae.into());
        for d in &self.delta {
            map.insert(delta_key(d.threshold), d.percent.into());
        }
        map.insert("eval_region".into(), self.eval_region.clone().into());
        map.insert("pixel_count".into(), self.pixel_count.into());
        Value::Object(map)
    }

    pub fn from_json(value: &Value) -> Result<Self> {
        let bad = |k: &str| Error::InvalidInput(format!("metrics report: missing or invalid {k:?}"));
        let obj = value.as_object().ok_or_else(|| bad("object"))?;
        let num = |k: &str| obj.get(k).and_then(Value::as_f64).ok_or_else(|| bad(k));
        let mut delta = Vec::new();
        for (k, v) in obj {
            if let Some(rest) = k.strip_prefix("delta_") {
                let threshold: f64 = rest.replacen('_', ".", 1).parse().map_err(|_| bad(k))?;
                delta.push(DeltaScore {
                    threshold,
                    percent: v.as_f64().ok_or_else(|| bad(k))?,
                });
            }
        }
        delta.sort_by(|a, b| a.threshold.total_cmp(&b.threshold));
        Ok(MetricsReport {
            rmse: num("rmse_m")?,
            rel: num("rel")?,
            mae: num("mae_m")?,
            delta,
            eval_region: obj
                .get("eval_region")
                .and_then(Value::as_str)
                .ok_or_else(|| bad("eval_region"))?
                .to_string(),
            pixel_count: obj
                .get("pixel_count")
                .and_then(Value::as_u64)
                .ok_or_else(|| bad("pixel_count"))? as usize,
        })
    }

    /// Mean of per-sample reports; pixel counts are summed.
    pub fn mean(reports: &[MetricsReport]) -> Result<MetricsReport> {
        let first = reports
            .first()
            .ok_or_else(|| Error::EmptyRegion("no reports to aggregate".into()))?;
        let n = reports.len() as f64;
        let avg = |f: &dyn Fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        let delta = first
            .delta
            .iter()
            .enumerate()
            .map(|(i, d)| DeltaScore {
                threshold: d.threshold,
                percent: avg(&|r| r.delta[i].percent),
            })
            .collect();
        Ok(MetricsReport {
            rmse: avg(&|r| r.rmse),
            rel: avg(&|r| r.rel),
            mae: avg(&|r| r.mae),
            delta,
            eval_region: first.eval_region.clone(),
            pixel_count: reports.iter().map(|r| r.pixel_count).sum(),
        })
    }
}

/// RMSE, REL, MAE and δ over `eval_mask ∧ gt > 0`.
///
/// A pixel is inside δ_t when `max(d/d*, d*/d) < t`; pixels with `d ≤ 0` never are.
pub fn compute_metrics(
    pred: &DepthMap,
    gt: &DepthMap,
    eval_mask: &Mask,
    thresholds: &[f64],
    eval_region: &str,
) -> Result<MetricsReport> {
    ensure_same_shape("depth_gt", pred.shape(), gt.shape())?;
    ensure_same_shape("eval mask", pred.shape(), eval_mask.shape())?;
    if let Some(t) = thresholds.iter().find(|t| !(**t > 0.0)) {
        return Err(Error::InvalidInput(format!(
            "delta threshold must be positive, got {t}"
        )));
    }
    let (mut sq, mut abs, mut rel, mut n) = (0.0, 0.0, 0.0, 0usize);
    let mut hits = vec![0usize; thresholds.len()];
    for i in 0..pred.len() {
        let (d, g) = (pred.data[i], gt.data[i]);
        if eval_mask.data[i] == 0 || !(g > 0.0) {
            continue;
        }
        let e = d - g;
        sq += e * e;
        abs += e.abs();
        rel += e.abs() / g;
        n += 1;
        if d > 0.0 {
            let ratio = (d / g).max(g / d);
            for (h, &t) in hits.iter_mut().zip(thresholds) {
                if ratio < t {
                    *h += 1;
                }
            }
        }
    }
    if n == 0 {
        return Err(Error::EmptyRegion(format!("evaluation region {eval_region} is empty")));
    }
    let nf = n as f64;
    Ok(MetricsReport {
        rmse: (sq / nf).sqrt(),
        rel: rel / nf,
        mae: abs / nf,
        delta: thresholds
            .iter()
            .zip(&hits)
            .map(|(&threshold, &h)| DeltaScore {
                threshold,
                percent: 100.0 * h as f64 / nf,
            })
            .collect(),
        eval_region: eval_region.to_string(),
        pixel_count: n,
    })
}

/// Metrics for one sample with the default thresholds.
pub fn evaluate_sample(pred: &DepthMap, gt: &DepthMap, mask: &Mask, region: EvalRegion) -> Result<MetricsReport> {
    compute_metrics(pred, gt, &region.select(mask), &DELTA_THRESHOLDS, region.name())
}

/// Per-region metrics; regions without valid pixels are absent.
pub fn metrics_by_region(
    pred: &DepthMap,
    gt: &DepthMap,
    regions: &RegionMap,
) -> Result<BTreeMap<RegionLabel, MetricsReport>> {
    ensure_same_shape("region map", pred.shape(), regions.labels.shape())?;
    let mut out = BTreeMap::new();
    for label in RegionLabel::TRANSPARENT {
        let select = regions.labels.map(|&l| (l == label) as u8);
        match compute_metrics(pred, gt, &select, &DELTA_THRESHOLDS, label.name()) {
            Ok(r) => {
                out.insert(label, r);
            }
            Err(Error::EmptyRegion(_)) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use proptest::prelude::*;

    fn row(v: &[f64]) -> DepthMap {
        Grid::from_vec(1, v.len(), v.to_vec()).unwrap()
    }

    fn ones(n: usize) -> Mask {
        Grid::filled(1, n, 1)
    }

    #[test]
    fn l1_examples() {
        let gt = row(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(global_l1(&gt, &gt).unwrap(), 0.0);
        let shifted = row(&[1.05, 2.05, 3.05, 4.05]);
        assert!((global_l1(&shifted, &gt).unwrap() - 0.05).abs() < 1e-12);

        let pred = row(&[1.1, 2.0, 2.7, 9.0]);
        let mask = Grid::from_vec(1, 4, vec![1, 0, 1, 0]).unwrap();
        assert!((masked_l1(&pred, &gt, &mask).unwrap() - 0.2).abs() < 1e-12);

        let half_invalid = row(&[1.0, 0.0, 3.0, 0.0]);
        let pred = row(&[1.2, 5.0, 3.4, 7.0]);
        assert!((global_l1(&pred, &half_invalid).unwrap() - 0.3).abs() < 1e-12);

        assert!(matches!(
            masked_l1(&gt, &gt, &Grid::filled(1, 4, 0)),
            Err(Error::EmptyRegion(_))
        ));
        assert!(global_l1(&gt, &row(&[0.0; 4])).is_err());
    }

    #[test]
    fn two_pixel_metrics() {
        let r = compute_metrics(&row(&[1.0, 2.0]), &row(&[1.1, 2.0]), &ones(2), &DELTA_THRESHOLDS, "x").unwrap();
        assert!((r.mae - 0.05).abs() < 1e-12);
        assert!((r.rmse - 0.005f64.sqrt()).abs() < 1e-12);
        assert!((r.rel - 0.1 / 1.1 / 2.0).abs() < 1e-12);
        assert_eq!(r.delta_at(1.05), Some(50.0));
        assert_eq!(r.delta_at(1.25), Some(100.0));
        assert_eq!(r.pixel_count, 2);
    }

    #[test]
    fn nonpositive_prediction_fails_delta() {
        let r = compute_metrics(&row(&[0.0, -1.0]), &row(&[1.0, 1.0]), &ones(2), &[1.25, 100.0], "x").unwrap();
        assert_eq!(r.delta_at(100.0), Some(0.0));
        assert!((r.mae - 1.5).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_thresholds_and_empty_region() {
        let g = row(&[1.0]);
        assert!(compute_metrics(&g, &g, &ones(1), &[0.0], "x").is_err());
        assert!(matches!(
            compute_metrics(&g, &row(&[0.0]), &ones(1), &DELTA_THRESHOLDS, "x"),
            Err(Error::EmptyRegion(_))
        ));
    }

    #[test]
    fn json_round_trip_uses_flat_keys() {
        let r = compute_metrics(
            &row(&[1.0, 2.0]),
            &row(&[1.1, 2.0]),
            &ones(2),
            &DELTA_THRESHOLDS,
            "transparent_mask",
        )
        .unwrap();
        let json = r.to_json();
        let keys: Vec<&str> = json.as_object().unwrap().keys().map(String::as_str).collect();
        for k in [
            "rmse_m",
            "rel",
            "mae_m",
            "delta_1_01",
            "delta_1_03",
            "delta_1_05",
            "delta_1_10",
            "delta_1_25",
            "eval_region",
            "pixel_count",
        ] {
            assert!(keys.contains(&k), "{k}");
        }
        assert_eq!(MetricsReport::from_json(&json).unwrap(), r);
    }

    #[test]
    fn region_isolation() {
        use crate::regions::classify_regions;
        let gt = row(&[0.5, 0.6, 0.7, 0.8]);
        let raw = row(&[0.5, 0.65, 0.0, 0.8]);
        let mask = Grid::from_vec(1, 4, vec![1, 1, 1, 0]).unwrap();
        let map = classify_regions(&raw, &gt, &mask, 0.001).unwrap();
        let mut pred = gt.clone();
        pred.data[2] += 0.1;
        let by = metrics_by_region(&pred, &gt, &map).unwrap();
        assert_eq!(by[&RegionLabel::Normal].mae, 0.0);
        assert_eq!(by[&RegionLabel::Refraction].rmse, 0.0);
        assert!((by[&RegionLabel::Reflection].mae - 0.1).abs() < 1e-12);

        let only_normal = classify_regions(&gt, &gt, &mask, 0.001).unwrap();
        let by = metrics_by_region(&gt, &gt, &only_normal).unwrap();
        assert_eq!(by.len(), 1);
    }

    #[test]
    fn mean_of_reports() {
        let a = compute_metrics(&row(&[1.0]), &row(&[1.1]), &ones(1), &DELTA_THRESHOLDS, "x").unwrap();
        let b = compute_metrics(&row(&[1.0, 1.0]), &row(&[1.0, 1.0]), &ones(2), &DELTA_THRESHOLDS, "x").unwrap();
        let m = MetricsReport::mean(&[a, b]).unwrap();
        assert!((m.mae - 0.05).abs() < 1e-12);
        assert_eq!(m.pixel_count, 3);
        assert_eq!(m.delta_at(1.25), Some(100.0));
        assert_eq!(m.delta_at(1.01), Some(50.0));
    }

    fn maps() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<bool>)> {
        (1usize..40).prop_flat_map(|n| {
            (
                prop::collection::vec(-0.5f64..4.0, n),
                prop::collection::vec(prop_oneof![Just(0.0), 0.05f64..4.0], n),
                prop::collection::vec(any::<bool>(), n),
            )
        })
    }

    proptest! {
        #[test]
        fn metric_invariants((p, g, m) in maps(), scale in 0.1f64..10.0) {
            let n = p.len();
            let pred = row(&p);
            let gt = row(&g);
            let mask = Grid::from_vec(1, n, m.iter().map(|&b| b as u8).collect()).unwrap();
            let Ok(r) = compute_metrics(&pred, &gt, &mask, &DELTA_THRESHOLDS, "x") else {
                return Ok(());
            };
            prop_assert!(r.rmse >= r.mae - 1e-12 && r.mae >= 0.0);
            for w in r.delta.windows(2) {
                prop_assert!(w[0].percent <= w[1].percent);
            }
            let scaled = compute_metrics(
                &pred.map(|v| v * scale), &gt.map(|v| v * scale), &mask, &DELTA_THRESHOLDS, "x").unwrap();
            prop_assert!((scaled.rmse - scale * r.rmse).abs() <= 1e-9 * (1.0 + scale * r.rmse));
            prop_assert!((scaled.mae - scale * r.mae).abs() <= 1e-9 * (1.0 + scale * r.mae));
            prop_assert!((scaled.rel - r.rel).abs() <= 1e-12 * (1.0 + r.rel));
            prop_assert_eq!(scaled.pixel_count, r.pixel_count);
            if let Ok(all) = global_l1(&pred, &gt) {
                prop_assert_eq!(masked_l1(&pred, &gt, &Grid::filled(1, n, 1)).unwrap(), all);
            }
        }
    }
}
