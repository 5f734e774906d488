//! Region taxonomy of transparent pixels and region-wise error analysis.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{ensure_same_shape, DepthMap, Grid, Mask};
use crate::io;
use crate::scene::RegionLabel;

/// Default NORMAL/REFRACTION split, meters.
pub const DEFAULT_TAU: f64 = 0.001;

#[derive(Debug, Clone, PartialEq)]
pub struct RegionMap {
    pub labels: Grid<RegionLabel>,
    pub tau: f64,
}

/// Labels each mask pixel as reflection (raw = 0), refraction
/// (`|raw − gt| > tau`) or normal.
pub fn classify_regions(depth_raw: &DepthMap, depth_gt: &DepthMap, mask: &Mask, tau: f64) -> Result<RegionMap> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::InvalidInput(format!("tau must be positive, got {tau}")));
    }
    ensure_same_shape("depth_gt", depth_raw.shape(), depth_gt.shape())?;
    ensure_same_shape("mask", depth_raw.shape(), mask.shape())?;
    let data = depth_raw
        .data
        .iter()
        .zip(&depth_gt.data)
        .zip(&mask.data)
        .map(|((&raw, &gt), &m)| {
            if m == 0 {
                RegionLabel::Background
            } else if raw == 0.0 {
                RegionLabel::Reflection
            } else if (raw - gt).abs() > tau {
                RegionLabel::Refraction
            } else {
                RegionLabel::Normal
            }
        })
        .collect();
    Ok(RegionMap {
        labels: Grid::from_vec(depth_raw.height, depth_raw.width, data)?,
        tau,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionEntry {
    /// Pixels carrying the label.
    pub pixel_count: usize,
    /// Share of transparent pixels.
    pub fraction: f64,
    /// Pixels with valid ground truth that enter the error statistics.
    pub valid_count: usize,
    /// `None` when the region has no valid pixels.
    pub rmse: Option<f64>,
    pub mae: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionStats {
    pub transparent_count: usize,
    pub regions: BTreeMap<RegionLabel, RegionEntry>,
}

impl RegionStats {
    pub fn get(&self, label: RegionLabel) -> &RegionEntry {
        &self.regions[&label]
    }
}

pub fn region_stats(map: &RegionMap, pred: &DepthMap, depth_gt: &DepthMap) -> Result<RegionStats> {
    ensure_same_shape("prediction", map.labels.shape(), pred.shape())?;
    ensure_same_shape("depth_gt", map.labels.shape(), depth_gt.shape())?;
    let mut acc: BTreeMap<RegionLabel, (usize, usize, f64, f64)> = RegionLabel::TRANSPARENT
        .iter()
        .map(|&l| (l, (0, 0, 0.0, 0.0)))
        .collect();
    for i in 0..pred.len() {
        let label = map.labels.data[i];
        if label == RegionLabel::Background {
            continue;
        }
        let a = acc.get_mut(&label).expect("transparent label");
        a.0 += 1;
        let gt = depth_gt.data[i];
        if gt > 0.0 {
            let e = pred.data[i] - gt;
            a.1 += 1;
            a.2 += e * e;
            a.3 += e.abs();
        }
    }
    let transparent_count: usize = acc.values().map(|a| a.0).sum();
    let regions = acc
        .into_iter()
        .map(|(label, (count, valid, sq, abs))| {
            let fraction = if transparent_count > 0 {
                count as f64 / transparent_count as f64
            } else {
                0.0
            };
            let (rmse, mae) = if valid > 0 {
                (Some((sq / valid as f64).sqrt()), Some(abs / valid as f64))
            } else {
                (None, None)
            };
            (
                label,
                RegionEntry {
                    pixel_count: count,
                    fraction,
                    valid_count: valid,
                    rmse,
                    mae,
                },
            )
        })
        .collect();
    Ok(RegionStats {
        transparent_count,
        regions,
    })
}

/// One sample's contribution to a region report.
#[derive(Debug, Clone)]
pub struct SampleRegionReport {
    pub sample_id: String,
    pub stats: RegionStats,
    /// Per-pixel `|pred − gt|`, zero where ground truth is invalid.
    pub abs_error: DepthMap,
}

impl SampleRegionReport {
    pub fn new(sample_id: impl Into<String>, stats: RegionStats, pred: &DepthMap, gt: &DepthMap) -> Self {
        let abs_error = Grid {
            height: gt.height,
            width: gt.width,
            data: pred
                .data
                .iter()
                .zip(&gt.data)
                .map(|(&p, &g)| if g > 0.0 { (p - g).abs() } else { 0.0 })
                .collect(),
        };
        SampleRegionReport {
            sample_id: sample_id.into(),
            stats,
            abs_error,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeatmapScale {
    pub colormap: String,
    /// Error in meters mapped to byte 255; byte 0 is zero error.
    pub scale_m: f64,
}

pub const REPORT_CSV: &str = "region_report.csv";

/// CSV rows `sample_id,region,metric,value,pixel_count`.
pub fn region_report_csv(reports: &[SampleRegionReport]) -> String {
    let mut out = String::from("sample_id,region,metric,value,pixel_count\n");
    for r in reports {
        for metric in ["rmse", "mae"] {
            for label in RegionLabel::TRANSPARENT {
                let e = r.stats.get(label);
                let value = match metric {
                    "rmse" => e.rmse,
                    _ => e.mae,
                };
                let value = value.map_or_else(|| "absent".to_string(), |v| v.to_string());
                let _ = writeln!(
                    out,
                    "{},{},{},{},{}",
                    r.sample_id,
                    label.name(),
                    metric,
                    value,
                    e.valid_count
                );
            }
        }
    }
    out
}

/// Writes the region CSV plus one absolute-error heatmap (with a JSON scale
/// sidecar) per sample into `dir`.
pub fn emit_region_report(reports: &[SampleRegionReport], dir: &Path) -> Result<()> {
    if reports.is_empty() {
        return Err(Error::InvalidInput("region report needs at least one sample".into()));
    }
    io::atomic_write(&dir.join(REPORT_CSV), region_report_csv(reports).as_bytes())?;
    for r in reports {
        let scale = r.abs_error.data.iter().copied().fold(0.0, f64::max);
        let img = r.abs_error.map(|&e| {
            if scale > 0.0 {
                (255.0 * e / scale).round().clamp(0.0, 255.0) as u8
            } else {
                0
            }
        });
        io::write_png_gray8(&dir.join(format!("{}_abs_error.png", r.sample_id)), &img)?;
        io::write_json(
            &dir.join(format!("{}_abs_error.json", r.sample_id)),
            &HeatmapScale {
                colormap: "linear-gray".into(),
                scale_m: scale,
            },
        )?;
    }
    Ok(())
}
