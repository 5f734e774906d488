//! Canonical on-disk sample directory.
//!
//! ```text
//! meta.json      intrinsics, z_max, seed, spec echo
//! rgb.png        8-bit RGB
//! depth_raw.png  16-bit, 0.1 mm units, 0 = missing
//! depth_gt.png   16-bit, 0.1 mm units, 0 = invalid
//! mask.png       8-bit, 0/255
//! regions.png    8-bit codes 0..=3
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CameraIntrinsics, RegionLabel, RgbdSample};
use crate::error::{Error, Result};
use crate::grid::{ensure_same_shape, DepthMap, Grid, Mask, RgbImage};
use crate::io;

pub const SAMPLE_FORMAT: &str = "remake-sample/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub z_max: f64,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<serde_json::Value>,
}

#[derive(Serialize, Deserialize)]
struct MetaFile {
    format: String,
    height: usize,
    width: usize,
    intrinsics: CameraIntrinsics,
    #[serde(flatten)]
    meta: SampleMeta,
}

pub fn write_sample(sample: &RgbdSample, dir: &Path) -> Result<()> {
    sample.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (h, w) = sample.shape();
    io::write_json(
        &dir.join("meta.json"),
        &MetaFile {
            format: SAMPLE_FORMAT.to_string(),
            height: h,
            width: w,
            intrinsics: sample.intrinsics,
            meta: sample.meta.clone(),
        },
    )?;
    let rgb8 = sample
        .rgb
        .map(|px| px.map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8));
    io::write_png_rgb8(&dir.join("rgb.png"), &rgb8)?;
    io::write_depth_png(&dir.join("depth_raw.png"), &sample.depth_raw)?;
    io::write_depth_png(&dir.join("depth_gt.png"), &sample.depth_gt)?;
    io::write_png_gray8(&dir.join("mask.png"), &sample.mask.map(|&m| m * 255))?;
    io::write_png_gray8(&dir.join("regions.png"), &sample.region_labels.map(|l| l.code()))?;
    Ok(())
}

/// Sample contents needed for inference; ground truth and labels are optional.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleInput {
    pub rgb: RgbImage,
    pub depth_raw: DepthMap,
    pub mask: Mask,
    pub depth_gt: Option<DepthMap>,
    pub region_labels: Option<Grid<RegionLabel>>,
    pub intrinsics: CameraIntrinsics,
    pub meta: SampleMeta,
}

fn read_meta(dir: &Path) -> Result<MetaFile> {
    let path = dir.join("meta.json");
    let meta: MetaFile = io::read_json(&path)?;
    let malformed = |msg: String| Error::MalformedMetadata {
        path: path.clone(),
        msg,
    };
    if meta.format != SAMPLE_FORMAT {
        return Err(malformed(format!("unknown format tag {:?}", meta.format)));
    }
    if (meta.intrinsics.height, meta.intrinsics.width) != (meta.height, meta.width) {
        return Err(malformed("intrinsics size differs from image size".into()));
    }
    meta.intrinsics.validate().map_err(|e| malformed(e.to_string()))?;
    Ok(meta)
}

fn read_mask(path: &Path) -> Result<Mask> {
    let raw = io::read_png_gray8(path)?;
    let mut out = Vec::with_capacity(raw.len());
    for &m in &raw.data {
        match m {
            0 => out.push(0),
            255 => out.push(1),
            other => {
                return Err(Error::InvalidInput(format!(
                    "{}: mask value {other} is neither 0 nor 255",
                    path.display()
                )))
            }
        }
    }
    Grid::from_vec(raw.height, raw.width, out)
}

fn read_regions(path: &Path) -> Result<Grid<RegionLabel>> {
    let raw = io::read_png_gray8(path)?;
    let mut out = Vec::with_capacity(raw.len());
    for &c in &raw.data {
        out.push(
            RegionLabel::from_code(c)
                .ok_or_else(|| Error::InvalidInput(format!("{}: unknown region code {c}", path.display())))?,
        );
    }
    Grid::from_vec(raw.height, raw.width, out)
}

/// Reads a sample for inference; only `meta.json`, `rgb.png`, `depth_raw.png`
/// and `mask.png` are required.
pub fn read_sample_input(dir: &Path) -> Result<SampleInput> {
    let meta = read_meta(dir)?;
    let shape = (meta.height, meta.width);
    let rgb8 = io::read_png_rgb8(&dir.join("rgb.png"))?;
    ensure_same_shape("rgb.png", shape, rgb8.shape())?;
    let rgb = rgb8.map(|px| px.map(|c| c as f64 / 255.0));
    let depth_raw = io::read_depth_png(&dir.join("depth_raw.png"))?;
    ensure_same_shape("depth_raw.png", shape, depth_raw.shape())?;
    let mask_path = dir.join("mask.png");
    if !mask_path.exists() {
        return Err(Error::MissingMask(mask_path));
    }
    let mask = read_mask(&mask_path)?;
    ensure_same_shape("mask.png", shape, mask.shape())?;
    let gt_path = dir.join("depth_gt.png");
    let depth_gt = if gt_path.exists() {
        let gt = io::read_depth_png(&gt_path)?;
        ensure_same_shape("depth_gt.png", shape, gt.shape())?;
        Some(gt)
    } else {
        None
    };
    let regions_path = dir.join("regions.png");
    let region_labels = if regions_path.exists() {
        let r = read_regions(&regions_path)?;
        ensure_same_shape("regions.png", shape, r.shape())?;
        Some(r)
    } else {
        None
    };
    Ok(SampleInput {
        rgb,
        depth_raw,
        mask,
        depth_gt,
        region_labels,
        intrinsics: meta.intrinsics,
        meta: meta.meta,
    })
}

/// Reads a complete sample written by [`write_sample`].
pub fn read_sample(dir: &Path) -> Result<RgbdSample> {
    if !dir.join("depth_gt.png").exists() {
        return Err(Error::MissingGroundTruth(dir.join("depth_gt.png")));
    }
    let input = read_sample_input(dir)?;
    let region_labels = input
        .region_labels
        .ok_or_else(|| Error::MissingFile(dir.join("regions.png")))?;
    let sample = RgbdSample {
        rgb: input.rgb,
        depth_raw: input.depth_raw,
        depth_gt: input.depth_gt.expect("checked above"),
        mask: input.mask,
        region_labels,
        intrinsics: input.intrinsics,
        meta: input.meta,
    };
    sample.validate()?;
    Ok(sample)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, tests::tube_spec};

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = generate_scene(&tube_spec(5)).unwrap();
        write_sample(&s, dir.path()).unwrap();
        let back = read_sample(dir.path()).unwrap();
        assert_eq!(back.mask, s.mask);
        assert_eq!(back.region_labels, s.region_labels);
        assert_eq!(back.intrinsics, s.intrinsics);
        assert_eq!(back.meta, s.meta);
        for (a, b) in s.depth_gt.data.iter().zip(&back.depth_gt.data) {
            assert!((a - b).abs() <= 0.5e-4 + 1e-12);
        }
        for (a, b) in s.depth_raw.data.iter().zip(&back.depth_raw.data) {
            assert!((a - b).abs() <= 0.5e-4 + 1e-12);
        }
        for (a, b) in s.rgb.data.iter().zip(&back.rgb.data) {
            for c in 0..3 {
                assert!((a[c] - b[c]).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }
    }

    #[test]
    fn missing_ground_truth() {
        let dir = tempfile::tempdir().unwrap();
        write_sample(&generate_scene(&tube_spec(1)).unwrap(), dir.path()).unwrap();
        std::fs::remove_file(dir.path().join("depth_gt.png")).unwrap();
        assert!(matches!(read_sample(dir.path()), Err(Error::MissingGroundTruth(_))));
        let input = read_sample_input(dir.path()).unwrap();
        assert!(input.depth_gt.is_none());
    }

    #[test]
    fn mask_shape_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        write_sample(&generate_scene(&tube_spec(1)).unwrap(), dir.path()).unwrap();
        io::write_png_gray8(&dir.path().join("mask.png"), &Grid::filled(10, 12, 0u8)).unwrap();
        let err = read_sample(dir.path()).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }), "{err}");
        assert!(err.to_string().starts_with("shape-mismatch"));
    }

    #[test]
    fn malformed_metadata() {
        let dir = tempfile::tempdir().unwrap();
        write_sample(&generate_scene(&tube_spec(1)).unwrap(), dir.path()).unwrap();
        std::fs::write(dir.path().join("meta.json"), "{ not json").unwrap();
        assert!(matches!(read_sample(dir.path()), Err(Error::MalformedMetadata { .. })));
    }

    #[test]
    fn missing_mask() {
        let dir = tempfile::tempdir().unwrap();
        write_sample(&generate_scene(&tube_spec(1)).unwrap(), dir.path()).unwrap();
        std::fs::remove_file(dir.path().join("mask.png")).unwrap();
        assert!(matches!(read_sample_input(dir.path()), Err(Error::MissingMask(_))));
    }

    #[test]
    fn unwritable_path() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("occupied");
        std::fs::write(&file, b"x").unwrap();
        let s = generate_scene(&tube_spec(1)).unwrap();
        assert!(matches!(write_sample(&s, &file.join("sub")), Err(Error::Io { .. })));
    }
}
