//! Pinhole backprojection, mask-guided object extraction and PLY/CSV export.
//!
//! Camera frame: x right, y down, z forward, meters.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{ensure_same_shape, DepthMap, Mask, RgbImage};
use crate::io::{atomic_write, read_to_string};
use crate::scene::CameraIntrinsics;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
    pub colors: Option<Vec<[f64; 3]>>,
    /// Source pixel `(u, v)` of each point.
    pub pixels: Vec<[usize; 2]>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

fn lift(
    depth: &DepthMap,
    intrinsics: &CameraIntrinsics,
    rgb: Option<&RgbImage>,
    keep: impl Fn(usize) -> bool,
) -> Result<PointCloud> {
    intrinsics.validate()?;
    ensure_same_shape("intrinsics", depth.shape(), (intrinsics.height, intrinsics.width))?;
    if let Some(rgb) = rgb {
        ensure_same_shape("rgb", depth.shape(), rgb.shape())?;
    }
    let mut cloud = PointCloud {
        colors: rgb.map(|_| Vec::new()),
        ..PointCloud::default()
    };
    for v in 0..depth.height {
        for u in 0..depth.width {
            let i = v * depth.width + u;
            let z = depth.data[i];
            if !(z > 0.0) || !keep(i) {
                continue;
            }
            if !z.is_finite() {
                return Err(Error::NonFinite(format!("depth at pixel ({u}, {v})")));
            }
            let [rx, ry, _] = intrinsics.ray(u as f64, v as f64);
            cloud.points.push([rx * z, ry * z, z]);
            cloud.pixels.push([u, v]);
            if let (Some(colors), Some(rgb)) = (cloud.colors.as_mut(), rgb) {
                colors.push(rgb.data[i]);
            }
        }
    }
    Ok(cloud)
}

/// Every pixel with positive depth becomes one point.
pub fn backproject(depth: &DepthMap, intrinsics: &CameraIntrinsics, rgb: Option<&RgbImage>) -> Result<PointCloud> {
    lift(depth, intrinsics, rgb, |_| true)
}

/// Points of the pixels where `mask = 1` and depth is positive.
pub fn extract_object(
    depth: &DepthMap,
    mask: &Mask,
    intrinsics: &CameraIntrinsics,
    rgb: Option<&RgbImage>,
) -> Result<PointCloud> {
    ensure_same_shape("mask", depth.shape(), mask.shape())?;
    if mask.data.iter().any(|&m| m > 1) {
        return Err(Error::InvalidInput("mask values must be 0 or 1".into()));
    }
    lift(depth, intrinsics, rgb, |i| mask.data[i] == 1)
}

/// Image coordinates `(u, v)` and depth of a camera-frame point.
pub fn project(point: [f64; 3], intrinsics: &CameraIntrinsics) -> (f64, f64, f64) {
    let [x, y, z] = point;
    (
        x / z * intrinsics.fx + intrinsics.cx,
        y / z * intrinsics.fy + intrinsics.cy,
        z,
    )
}

/// Clamps network output to `(0, z_max]`: nonpositive and non-finite values
/// become 0 (no point), larger values become `z_max`.
pub fn clamp_depth(depth: &DepthMap, z_max: f64) -> DepthMap {
    depth.map(|&d| if d.is_finite() && d > 0.0 { d.min(z_max) } else { 0.0 })
}

/// Header comment lines recording the frame, intrinsics and clamp range.
pub fn ply_comments(intrinsics: &CameraIntrinsics, z_max: Option<f64>) -> Vec<String> {
    let mut c = vec![
        "frame camera x-right y-down z-forward meters".to_string(),
        format!(
            "intrinsics fx={} fy={} cx={} cy={} width={} height={}",
            intrinsics.fx, intrinsics.fy, intrinsics.cx, intrinsics.cy, intrinsics.width, intrinsics.height
        ),
    ];
    if let Some(z) = z_max {
        c.push(format!("depth clamped to (0, {z}]"));
    }
    c
}

fn to_u8(c: f64) -> u8 {
    (c.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// ASCII PLY with float32 coordinates and, when present, uint8 colors.
pub fn write_ply(cloud: &PointCloud, path: &Path, comments: &[String]) -> Result<()> {
    let mut s = String::from("ply\nformat ascii 1.0\n");
    for c in comments {
        writeln!(s, "comment {c}").unwrap();
    }
    writeln!(s, "element vertex {}", cloud.len()).unwrap();
    s.push_str("property float x\nproperty float y\nproperty float z\n");
    if cloud.colors.is_some() {
        s.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    s.push_str("end_header\n");
    for (i, p) in cloud.points.iter().enumerate() {
        write!(s, "{} {} {}", p[0] as f32, p[1] as f32, p[2] as f32).unwrap();
        if let Some(colors) = &cloud.colors {
            let c = colors[i];
            write!(s, " {} {} {}", to_u8(c[0]), to_u8(c[1]), to_u8(c[2])).unwrap();
        }
        s.push('\n');
    }
    atomic_write(path, s.as_bytes())
}

/// Parses an ASCII PLY written by [`write_ply`]. Pixel indices are not stored
/// in the file and come back empty.
pub fn read_ply(path: &Path) -> Result<PointCloud> {
    let text = read_to_string(path)?;
    let bad = |msg: String| Error::MalformedMetadata {
        path: path.to_path_buf(),
        msg,
    };
    let mut lines = text.lines();
    if lines.next() != Some("ply") {
        return Err(bad("missing ply magic".into()));
    }
    let mut count = None;
    let mut props = Vec::new();
    for line in lines.by_ref() {
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts.as_slice() {
            ["end_header"] => break,
            ["element", "vertex", n] => count = Some(n.parse::<usize>().map_err(|e| bad(e.to_string()))?),
            ["property", _, name] => props.push(name.to_string()),
            _ => {}
        }
    }
    let count = count.ok_or_else(|| bad("no vertex element".into()))?;
    let has_color = props.iter().any(|p| p == "red");
    let mut cloud = PointCloud {
        colors: has_color.then(Vec::new),
        ..PointCloud::default()
    };
    for _ in 0..count {
        let line = lines.next().ok_or_else(|| bad("fewer vertices than declared".into()))?;
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| bad(e.to_string()))?;
        if vals.len() != props.len() {
            return Err(bad(format!(
                "vertex has {} values, expected {}",
                vals.len(),
                props.len()
            )));
        }
        cloud.points.push([vals[0], vals[1], vals[2]]);
        if let Some(colors) = cloud.colors.as_mut() {
            colors.push([vals[3] / 255.0, vals[4] / 255.0, vals[5] / 255.0]);
        }
    }
    Ok(cloud)
}

/// CSV with header `u,v,x,y,z`.
pub fn cloud_csv(cloud: &PointCloud) -> String {
    let mut s = String::from("u,v,x,y,z\n");
    for (p, px) in cloud.points.iter().zip(&cloud.pixels) {
        writeln!(s, "{},{},{},{},{}", px[0], px[1], p[0], p[1], p[2]).unwrap();
    }
    s
}

pub fn write_cloud_csv(cloud: &PointCloud, path: &Path) -> Result<()> {
    atomic_write(path, cloud_csv(cloud).as_bytes())
}
