//! Affine-invariant relative depth maps (near = 1, far = 0).

use std::collections::VecDeque;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{DepthMap, Grid};
use crate::io;
use crate::noise::value_noise;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Proxy,
    External,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelativeDepthMap {
    pub values: Grid<f64>,
    pub provenance: Provenance,
    /// Non-fatal conditions met while producing the map.
    pub warnings: Vec<String>,
}

impl RelativeDepthMap {
    /// A map carrying no ordering information.
    pub fn neutral(height: usize, width: usize) -> Self {
        RelativeDepthMap {
            values: Grid::filled(height, width, 0.5),
            provenance: Provenance::Proxy,
            warnings: Vec::new(),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.shape()
    }
}

/// Min-max normalizes `values` to [0,1], mapping the largest to 1.
/// A constant input maps to 0.5. Returns whether the input was degenerate.
fn min_max(values: &mut [f64]) -> bool {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        for v in values.iter_mut() {
            *v = ((*v - lo) / (hi - lo)).clamp(0.0, 1.0);
        }
        false
    } else {
        values.fill(0.5);
        true
    }
}

/// Relative depth derived from ground truth: `(d_max − d)/(d_max − d_min)` over
/// valid pixels, holes filled from the nearest valid pixel (4-connected), plus
/// an optional smooth perturbation bounded by `noise_amplitude`.
pub fn proxy_relative_depth(depth_gt: &DepthMap, noise_amplitude: f64, seed: u64) -> Result<RelativeDepthMap> {
    if !(noise_amplitude >= 0.0) || !noise_amplitude.is_finite() {
        return Err(Error::InvalidInput(format!(
            "noise amplitude must be nonnegative, got {noise_amplitude}"
        )));
    }
    let valid: Vec<bool> = depth_gt.data.iter().map(|&d| d > 0.0 && d.is_finite()).collect();
    if !valid.iter().any(|&v| v) {
        return Err(Error::InvalidInput(
            "relative depth proxy needs at least one valid depth pixel".into(),
        ));
    }
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (d, _) in depth_gt.data.iter().zip(&valid).filter(|(_, &v)| v) {
        lo = lo.min(*d);
        hi = hi.max(*d);
    }
    let mut values: Vec<f64> = depth_gt
        .data
        .iter()
        .zip(&valid)
        .map(|(&d, &ok)| match ok {
            false => 0.0,
            true if hi > lo => ((hi - d) / (hi - lo)).clamp(0.0, 1.0),
            true => 0.5,
        })
        .collect();
    fill_nearest(&mut values, &valid, depth_gt.height, depth_gt.width);
    if noise_amplitude > 0.0 {
        let cell = (depth_gt.width.max(depth_gt.height) as f64 / 4.0).max(2.0);
        let field = value_noise(depth_gt.height, depth_gt.width, cell, seed);
        for (v, n) in values.iter_mut().zip(&field.data) {
            *v = (*v + noise_amplitude * n).clamp(0.0, 1.0);
        }
    }
    Ok(RelativeDepthMap {
        values: Grid::from_vec(depth_gt.height, depth_gt.width, values)?,
        provenance: Provenance::Proxy,
        warnings: Vec::new(),
    })
}

/// Multi-source BFS fill; ties go to the source reached first in scan order.
fn fill_nearest(values: &mut [f64], valid: &[bool], height: usize, width: usize) {
    let mut seen = valid.to_vec();
    let mut queue: VecDeque<usize> = (0..values.len()).filter(|&i| valid[i]).collect();
    while let Some(i) = queue.pop_front() {
        let (v, u) = (i / width, i % width);
        let mut visit = |j: usize| {
            if !seen[j] {
                seen[j] = true;
                values[j] = values[i];
                queue.push_back(j);
            }
        };
        if v > 0 {
            visit(i - width);
        }
        if u > 0 {
            visit(i - 1);
        }
        if u + 1 < width {
            visit(i + 1);
        }
        if v + 1 < height {
            visit(i + width);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ValueConvention {
    /// Larger values are nearer (disparity-like).
    #[default]
    NearIsLarge,
    /// Larger values are farther (depth-like).
    FarIsLarge,
}

/// JSON sidecar `<map>.json` next to an external map.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExternalMapSidecar {
    pub height: usize,
    pub width: usize,
    #[serde(default)]
    pub convention: ValueConvention,
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

/// Loads an externally estimated relative depth map: a 16-bit PNG or a
/// little-endian float32 grid, each with an optional (PNG) or required (raw)
/// JSON sidecar. Output is near-is-1 normalized and bilinearly resampled
/// (corner-aligned) to `target_shape = (height, width)`.
pub fn ingest_external_map(path: &Path, target_shape: (usize, usize)) -> Result<RelativeDepthMap> {
    let sidecar_file = sidecar_path(path);
    let sidecar: Option<ExternalMapSidecar> = if sidecar_file.exists() {
        Some(io::read_json(&sidecar_file)?)
    } else {
        None
    };
    let is_png = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
    let mut grid = if is_png {
        let g = io::read_png_u16(path)?;
        if let Some(sc) = &sidecar {
            crate::grid::ensure_same_shape("external map", (sc.height, sc.width), g.shape())?;
        }
        g.map(|&v| v as f64)
    } else {
        let sc = sidecar
            .as_ref()
            .ok_or_else(|| Error::MissingFile(sidecar_file.clone()))?;
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() != sc.height * sc.width * 4 {
            return Err(Error::MalformedMetadata {
                path: sidecar_file.clone(),
                msg: format!(
                    "shape {}x{} needs {} bytes, file has {}",
                    sc.height,
                    sc.width,
                    sc.height * sc.width * 4,
                    bytes.len()
                ),
            });
        }
        let data: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("{}: non-finite values", path.display())));
        }
        Grid::from_vec(sc.height, sc.width, data)?
    };
    if grid.is_empty() {
        return Err(Error::InvalidInput(format!("{}: empty map", path.display())));
    }
    let mut warnings = Vec::new();
    if min_max(&mut grid.data) {
        warnings.push(format!("{}: constant map normalized to 0.5 everywhere", path.display()));
    }
    if sidecar.map(|s| s.convention) == Some(ValueConvention::FarIsLarge) {
        for v in &mut grid.data {
            *v = 1.0 - *v;
        }
    }
    let values = if grid.shape() == target_shape {
        grid
    } else {
        resample_bilinear(&grid, target_shape)
    };
    Ok(RelativeDepthMap {
        values,
        provenance: Provenance::External,
        warnings,
    })
}

/// Corner-aligned bilinear resampling.
pub fn resample_bilinear(src: &Grid<f64>, (height, width): (usize, usize)) -> Grid<f64> {
    let axis = |n_src: usize, n_dst: usize, i: usize| -> (usize, usize, f64) {
        if n_src == 1 || n_dst == 1 {
            return (0, 0, 0.0);
        }
        let x = i as f64 * (n_src - 1) as f64 / (n_dst - 1) as f64;
        let i0 = (x.floor() as usize).min(n_src - 1);
        let i1 = (i0 + 1).min(n_src - 1);
        (i0, i1, x - i0 as f64)
    };
    Grid::from_fn(height, width, |v, u| {
        let (v0, v1, ty) = axis(src.height, height, v);
        let (u0, u1, tx) = axis(src.width, width, u);
        let top = src.at(v0, u0) * (1.0 - tx) + src.at(v0, u1) * tx;
        let bottom = src.at(v1, u0) * (1.0 - tx) + src.at(v1, u1) * tx;
        top * (1.0 - ty) + bottom * ty
    })
}
