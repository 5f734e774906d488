//! Synthetic transparent-object RGB-D scenes.
//!
//! A scene is rendered by casting one ray per pixel center against a set of
//! analytic primitives in front of a textured background plane. Pixels whose
//! nearest surface belongs to a transparent primitive form the transparent
//! mask; the sensor corruption model then splits those pixels into reflection
//! (zero depth), refraction (smoothly distorted depth) and normal (exact depth)
//! regions with spatially coherent boundaries.

mod geometry;
mod sample_io;

use serde::{Deserialize, Serialize};

pub use geometry::{dot, norm, BackgroundPlane, Hit, Primitive, Rotation, Shape, Vec3};
pub use sample_io::{read_sample, read_sample_input, write_sample, SampleInput, SampleMeta};

use crate::error::{Error, Result};
use crate::grid::{DepthMap, Grid, Mask, RgbImage};
use crate::noise::value_noise;

pub const DEFAULT_Z_MAX: f64 = 3.0;
/// Fraction of transparent pixels the achieved region ratios may miss by.
pub const RATIO_TOLERANCE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    /// Square pixels with focal length `focal_scale · width`, principal point at the image center.
    pub fn centered(width: usize, height: usize, focal_scale: f64) -> Self {
        let f = focal_scale * width as f64;
        CameraIntrinsics {
            fx: f,
            fy: f,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx.is_finite()
            && self.fy.is_finite()
            && self.fx > 0.0
            && self.fy > 0.0
            && self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("invalid intrinsics {self:?}")))
        }
    }

    /// Direction through pixel center `(u, v)` with unit z component.
    #[inline]
    pub fn ray(&self, u: f64, v: f64) -> Vec3 {
        [(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[repr(u8)]
pub enum RegionLabel {
    Background = 0,
    Normal = 1,
    Refraction = 2,
    Reflection = 3,
}

impl RegionLabel {
    /// The three labels a transparent pixel can take.
    pub const TRANSPARENT: [RegionLabel; 3] = [RegionLabel::Normal, RegionLabel::Refraction, RegionLabel::Reflection];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(RegionLabel::Background),
            1 => Some(RegionLabel::Normal),
            2 => Some(RegionLabel::Refraction),
            3 => Some(RegionLabel::Reflection),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            RegionLabel::Background => "background",
            RegionLabel::Normal => "normal",
            RegionLabel::Refraction => "refraction",
            RegionLabel::Reflection => "reflection",
        }
    }
}

/// Target fractions of transparent pixels per region.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionRatios {
    pub refraction: f64,
    pub reflection: f64,
    pub normal: f64,
}

impl RegionRatios {
    /// Composition of the TransCG training set.
    pub const TRANSCG: RegionRatios = RegionRatios {
        refraction: 0.6008,
        reflection: 0.1747,
        normal: 0.2245,
    };

    pub fn validate(&self) -> Result<()> {
        let parts = [self.refraction, self.reflection, self.normal];
        if parts.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidSpec(format!("negative region ratio in {self:?}")));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidSpec(format!("region ratios must sum to 1, got {sum}")));
        }
        Ok(())
    }

    pub fn get(&self, label: RegionLabel) -> f64 {
        match label {
            RegionLabel::Normal => self.normal,
            RegionLabel::Refraction => self.refraction,
            RegionLabel::Reflection => self.reflection,
            RegionLabel::Background => 0.0,
        }
    }
}

impl Default for RegionRatios {
    fn default() -> Self {
        RegionRatios::TRANSCG
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    /// Defaults to `CameraIntrinsics::centered(width, height, 1.0)`.
    #[serde(default)]
    pub intrinsics: Option<CameraIntrinsics>,
    pub primitives: Vec<Primitive>,
    pub background: BackgroundPlane,
    #[serde(default)]
    pub ratios: RegionRatios,
    /// Maximum relative refraction distortion `|ε|`.
    pub distortion_amplitude: f64,
    /// Smallest absolute refraction offset in meters when the amplitude is nonzero.
    #[serde(default = "default_min_refraction_offset")]
    pub min_refraction_offset: f64,
    /// Opacity of transparent surfaces in the RGB rendering.
    #[serde(default = "default_alpha")]
    pub transparent_alpha: f64,
    /// Feature size in pixels of the region and distortion fields.
    #[serde(default)]
    pub region_scale: Option<f64>,
    #[serde(default = "default_z_max")]
    pub z_max: f64,
    pub seed: u64,
}

fn default_min_refraction_offset() -> f64 {
    0.002
}
fn default_alpha() -> f64 {
    0.25
}
fn default_z_max() -> f64 {
    DEFAULT_Z_MAX
}

impl SceneSpec {
    pub fn intrinsics(&self) -> CameraIntrinsics {
        self.intrinsics
            .unwrap_or_else(|| CameraIntrinsics::centered(self.width, self.height, 1.0))
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::InvalidSpec("empty resolution".into()));
        }
        let k = self.intrinsics();
        if k.width != self.width || k.height != self.height {
            return Err(Error::InvalidSpec(
                "intrinsics image size differs from resolution".into(),
            ));
        }
        k.validate().map_err(|e| Error::InvalidSpec(e.to_string()))?;
        if !self.primitives.iter().any(|p| p.transparent) {
            return Err(Error::InvalidSpec("at least one primitive must be transparent".into()));
        }
        for p in &self.primitives {
            p.validate().map_err(Error::InvalidSpec)?;
        }
        self.ratios.validate()?;
        let amp = self.distortion_amplitude;
        if !amp.is_finite() || !(0.0..1.0).contains(&amp) {
            return Err(Error::InvalidSpec(format!("distortion amplitude {amp} outside [0,1)")));
        }
        if !(self.min_refraction_offset >= 0.0) {
            return Err(Error::InvalidSpec("negative minimum refraction offset".into()));
        }
        if !(0.0..=1.0).contains(&self.transparent_alpha) {
            return Err(Error::InvalidSpec("transparent_alpha outside [0,1]".into()));
        }
        if !(self.z_max > 0.0) || !self.z_max.is_finite() {
            return Err(Error::InvalidSpec("z_max must be positive".into()));
        }
        if !(self.background.depth > 0.0 && self.background.depth <= self.z_max) {
            return Err(Error::InvalidSpec(format!(
                "background depth {} outside (0, z_max]",
                self.background.depth
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RgbdSample {
    pub rgb: RgbImage,
    pub depth_raw: DepthMap,
    pub depth_gt: DepthMap,
    pub mask: Mask,
    pub region_labels: Grid<RegionLabel>,
    pub intrinsics: CameraIntrinsics,
    pub meta: SampleMeta,
}

impl RgbdSample {
    pub fn shape(&self) -> (usize, usize) {
        self.depth_gt.shape()
    }

    /// Checks shapes and the label/depth invariants.
    pub fn validate(&self) -> Result<()> {
        let shape = self.depth_gt.shape();
        crate::grid::ensure_same_shape("rgb", shape, self.rgb.shape())?;
        crate::grid::ensure_same_shape("depth_raw", shape, self.depth_raw.shape())?;
        crate::grid::ensure_same_shape("mask", shape, self.mask.shape())?;
        crate::grid::ensure_same_shape("regions", shape, self.region_labels.shape())?;
        crate::grid::ensure_same_shape("intrinsics", shape, (self.intrinsics.height, self.intrinsics.width))?;
        self.intrinsics.validate()?;
        for i in 0..self.depth_gt.len() {
            let (raw, gt) = (self.depth_raw.data[i], self.depth_gt.data[i]);
            let m = self.mask.data[i];
            let label = self.region_labels.data[i];
            if !raw.is_finite() || !gt.is_finite() || raw < 0.0 || gt < 0.0 {
                return Err(Error::InvalidInput(format!("pixel {i}: bad depth")));
            }
            if m > 1 {
                return Err(Error::InvalidInput(format!("pixel {i}: mask not binary")));
            }
            if (m == 1) != (label != RegionLabel::Background) {
                return Err(Error::InvalidInput(format!(
                    "pixel {i}: region label {label:?} inconsistent with mask {m}"
                )));
            }
            if label == RegionLabel::Reflection && raw != 0.0 {
                return Err(Error::InvalidInput(format!(
                    "pixel {i}: reflection pixel with nonzero raw depth"
                )));
            }
            if (m == 0 || label == RegionLabel::Normal) && raw != gt {
                return Err(Error::InvalidInput(format!(
                    "pixel {i}: raw depth differs from ground truth outside corrupted regions"
                )));
            }
        }
        Ok(())
    }

    pub fn transparent_count(&self) -> usize {
        self.mask.data.iter().filter(|&&m| m == 1).count()
    }

    /// Achieved fraction of transparent pixels carrying `label`.
    pub fn region_fraction(&self, label: RegionLabel) -> f64 {
        let n = self.transparent_count();
        if n == 0 {
            return 0.0;
        }
        let k = self.region_labels.data.iter().filter(|&&l| l == label).count();
        k as f64 / n as f64
    }
}

enum Surface {
    Background,
    Primitive(usize),
}

const REGION_SEED_SALT: u64 = 0x5EED_0001;
const DISTORTION_SEED_SALT: u64 = 0x5EED_0002;
const TEXTURE_SEED_SALT: u64 = 0x5EED_0003;

/// Renders a scene and applies the transparent-sensor corruption model.
pub fn generate_scene(spec: &SceneSpec) -> Result<RgbdSample> {
    spec.validate()?;
    let k = spec.intrinsics();
    let (h, w) = (spec.height, spec.width);
    let light = geometry::normalize([0.3, -0.5, -1.0]);
    let texture = value_noise(h, w, spec.background.texture_scale, spec.seed ^ TEXTURE_SEED_SALT);

    let mut depth_gt = Grid::filled(h, w, 0.0);
    let mut rgb = Grid::filled(h, w, [0.0; 3]);
    let mut mask = Grid::filled(h, w, 0u8);

    for v in 0..h {
        for u in 0..w {
            let dir = k.ray(u as f64, v as f64);
            let i = v * w + u;
            let bg = spec
                .background
                .intersect(dir)
                .ok_or_else(|| Error::InvalidSpec(format!("pixel ({u},{v}) misses the background plane")))?;
            let mut nearest = (bg, Surface::Background);
            let mut nearest_opaque = (bg, Surface::Background);
            for (pi, p) in spec.primitives.iter().enumerate() {
                if let Some(hit) = p.intersect(dir) {
                    if hit.t < nearest.0.t {
                        nearest = (hit, Surface::Primitive(pi));
                    }
                    if !p.transparent && hit.t < nearest_opaque.0.t {
                        nearest_opaque = (hit, Surface::Primitive(pi));
                    }
                }
            }
            let t = nearest.0.t;
            if !(t > 0.0 && t <= spec.z_max) {
                return Err(Error::InvalidSpec(format!(
                    "pixel ({u},{v}) depth {t} outside (0, z_max={}]",
                    spec.z_max
                )));
            }
            depth_gt.data[i] = t;

            let view = geometry::normalize(dir);
            let shade_opaque = |hit: &Hit, surface: &Surface| -> [f64; 3] {
                match surface {
                    Surface::Background => {
                        let s = 0.5 * (texture.data[i] + 1.0);
                        let (a, b) = (spec.background.color_a, spec.background.color_b);
                        [0, 1, 2].map(|c| a[c] * (1.0 - s) + b[c] * s)
                    }
                    Surface::Primitive(pi) => {
                        let lambert = (-dot(hit.normal, light)).max(0.0);
                        let col = spec.primitives[*pi].color;
                        col.map(|c| c * (0.35 + 0.65 * lambert))
                    }
                }
            };
            rgb.data[i] = match nearest.1 {
                Surface::Primitive(pi) if spec.primitives[pi].transparent => {
                    mask.data[i] = 1;
                    let behind = shade_opaque(&nearest_opaque.0, &nearest_opaque.1);
                    let cos = dot(nearest.0.normal, view).abs();
                    let alpha = spec.transparent_alpha + (1.0 - spec.transparent_alpha) * 0.5 * (1.0 - cos).powi(3);
                    let tint = spec.primitives[pi].color;
                    [0, 1, 2].map(|c| ((1.0 - alpha) * behind[c] + alpha * tint[c]).clamp(0.0, 1.0))
                }
                ref s => shade_opaque(&nearest.0, s).map(|c| c.clamp(0.0, 1.0)),
            };
        }
    }

    let transparent: Vec<usize> = (0..h * w).filter(|&i| mask.data[i] == 1).collect();
    let n = transparent.len();
    if n == 0 {
        return Err(Error::RatioShortfall(format!(
            "no transparent pixels in view; need {:.4}/{:.4}/{:.4} refraction/reflection/normal",
            spec.ratios.refraction, spec.ratios.reflection, spec.ratios.normal
        )));
    }

    // Reflection takes the lowest values of the region field, refraction the
    // middle band, normal the rest.
    let cell = spec.region_scale.unwrap_or_else(|| (w.max(h) as f64 / 6.0).max(3.0));
    let field = value_noise(h, w, cell, spec.seed ^ REGION_SEED_SALT);
    let mut order = transparent.clone();
    order.sort_by(|&a, &b| field.data[a].total_cmp(&field.data[b]).then(a.cmp(&b)));
    let n_reflection = (spec.ratios.reflection * n as f64).round() as usize;
    let n_refraction = ((spec.ratios.refraction * n as f64).round() as usize).min(n - n_reflection);
    let mut labels = Grid::filled(h, w, RegionLabel::Background);
    for (rank, &i) in order.iter().enumerate() {
        labels.data[i] = if rank < n_reflection {
            RegionLabel::Reflection
        } else if rank < n_reflection + n_refraction {
            RegionLabel::Refraction
        } else {
            RegionLabel::Normal
        };
    }
    let achieved = [
        (RegionLabel::Refraction, n_refraction),
        (RegionLabel::Reflection, n_reflection),
        (RegionLabel::Normal, n - n_reflection - n_refraction),
    ];
    for (label, count) in achieved {
        let frac = count as f64 / n as f64;
        let target = spec.ratios.get(label);
        if (frac - target).abs() > RATIO_TOLERANCE {
            return Err(Error::RatioShortfall(format!(
                "{} fraction {frac:.4} misses target {target:.4} by more than {RATIO_TOLERANCE} \
                 with only {n} transparent pixels",
                label.name()
            )));
        }
    }

    let amp = spec.distortion_amplitude;
    let distortion = value_noise(h, w, cell, spec.seed ^ DISTORTION_SEED_SALT);
    let mut depth_raw = depth_gt.clone();
    for &i in &transparent {
        match labels.data[i] {
            RegionLabel::Reflection => depth_raw.data[i] = 0.0,
            RegionLabel::Refraction if amp > 0.0 => {
                let gt = depth_gt.data[i];
                let floor = spec.min_refraction_offset / gt;
                if floor > amp {
                    return Err(Error::InvalidSpec(format!(
                        "minimum refraction offset {} m exceeds amplitude at depth {gt} m",
                        spec.min_refraction_offset
                    )));
                }
                let e = distortion.data[i];
                let magnitude = (amp * e.abs()).max(floor);
                let eps = if e < 0.0 { -magnitude } else { magnitude };
                depth_raw.data[i] = gt * (1.0 + eps);
            }
            _ => {}
        }
    }

    let sample = RgbdSample {
        rgb,
        depth_raw,
        depth_gt,
        mask,
        region_labels: labels,
        intrinsics: k,
        meta: SampleMeta {
            z_max: spec.z_max,
            seed: spec.seed,
            spec: serde_json::to_value(spec).ok(),
        },
    };
    debug_assert!(sample.validate().is_ok());
    Ok(sample)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tube_spec(seed: u64) -> SceneSpec {
        SceneSpec {
            height: 64,
            width: 64,
            intrinsics: None,
            primitives: vec![
                Primitive {
                    shape: Shape::Cylinder {
                        radius: 0.07,
                        half_length: 0.2,
                    },
                    center: [0.0, 0.0, 0.55],
                    rotation_deg: [90.0, 0.0, 20.0],
                    transparent: true,
                    color: [0.8, 0.9, 1.0],
                },
                Primitive {
                    shape: Shape::Box {
                        half_extents: [0.04, 0.04, 0.04],
                    },
                    center: [0.15, 0.12, 0.6],
                    rotation_deg: [0.0, 0.0, 30.0],
                    transparent: false,
                    color: [0.9, 0.2, 0.1],
                },
            ],
            background: BackgroundPlane {
                depth: 0.7,
                tilt_deg: [10.0, 0.0],
                color_a: [0.2, 0.3, 0.2],
                color_b: [0.8, 0.7, 0.6],
                texture_scale: 6.0,
            },
            ratios: RegionRatios::TRANSCG,
            distortion_amplitude: 0.05,
            min_refraction_offset: 0.002,
            transparent_alpha: 0.25,
            region_scale: None,
            z_max: 3.0,
            seed,
        }
    }

    #[test]
    fn deterministic() {
        let a = generate_scene(&tube_spec(3)).unwrap();
        let b = generate_scene(&tube_spec(3)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.depth_raw, generate_scene(&tube_spec(4)).unwrap().depth_raw);
    }

    #[test]
    fn corruption_model_invariants() {
        for seed in 0..5 {
            let s = generate_scene(&tube_spec(seed)).unwrap();
            s.validate().unwrap();
            assert!(s.transparent_count() >= 500);
            for i in 0..s.depth_gt.len() {
                match s.region_labels.data[i] {
                    RegionLabel::Refraction => {
                        let eps = s.depth_raw.data[i] / s.depth_gt.data[i] - 1.0;
                        assert!(eps.abs() <= 0.05 + 1e-12);
                        assert!((s.depth_raw.data[i] - s.depth_gt.data[i]).abs() >= 0.002 - 1e-12);
                    }
                    RegionLabel::Reflection => assert_eq!(s.depth_raw.data[i], 0.0),
                    _ => assert_eq!(s.depth_raw.data[i], s.depth_gt.data[i]),
                }
                if s.mask.data[i] == 0 {
                    assert!(s.depth_raw.data[i] > 0.0);
                }
            }
        }
    }

    #[test]
    fn zero_amplitude_leaves_refraction_exact() {
        let mut spec = tube_spec(1);
        spec.distortion_amplitude = 0.0;
        let s = generate_scene(&spec).unwrap();
        let mut seen = 0;
        for i in 0..s.depth_gt.len() {
            if s.region_labels.data[i] == RegionLabel::Refraction {
                seen += 1;
                assert_eq!(s.depth_raw.data[i], s.depth_gt.data[i]);
            }
        }
        assert!(seen > 0);
    }

    #[test]
    fn ratios_met_within_tolerance() {
        for seed in 0..20 {
            let s = generate_scene(&tube_spec(seed)).unwrap();
            for label in RegionLabel::TRANSPARENT {
                let err = (s.region_fraction(label) - RegionRatios::TRANSCG.get(label)).abs();
                assert!(err <= RATIO_TOLERANCE, "seed {seed} {label:?} {err}");
            }
        }
    }

    #[test]
    fn transparent_object_out_of_view_is_a_shortfall() {
        let mut spec = tube_spec(0);
        spec.primitives[0].center = [5.0, 0.0, 0.5];
        let err = generate_scene(&spec).unwrap_err();
        assert!(matches!(err, Error::RatioShortfall(_)), "{err}");
    }

    #[test]
    fn tiny_transparent_region_cannot_meet_ratios() {
        let mut spec = tube_spec(0);
        spec.primitives[0].shape = Shape::Sphere { radius: 0.006 };
        let err = generate_scene(&spec).unwrap_err();
        assert!(matches!(err, Error::RatioShortfall(_)), "{err}");
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut spec = tube_spec(0);
        spec.primitives[0].transparent = false;
        assert!(matches!(generate_scene(&spec), Err(Error::InvalidSpec(_))));
        let mut spec = tube_spec(0);
        spec.ratios.normal = 0.3;
        assert!(matches!(generate_scene(&spec), Err(Error::InvalidSpec(_))));
        let mut spec = tube_spec(0);
        spec.background.depth = 4.0;
        assert!(matches!(generate_scene(&spec), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn depth_matches_ray_intersection() {
        let spec = tube_spec(2);
        let s = generate_scene(&spec).unwrap();
        let k = s.intrinsics;
        for v in 0..s.depth_gt.height {
            for u in 0..s.depth_gt.width {
                let z = *s.depth_gt.at(v, u);
                let p = geometry::scale(k.ray(u as f64, v as f64), z);
                let on_something = spec.primitives.iter().any(|prim| prim.signed_distance(p).abs() < 1e-6)
                    || spec
                        .background
                        .intersect(k.ray(u as f64, v as f64))
                        .is_some_and(|h| (h.t - z).abs() < 1e-6);
                assert!(on_something, "pixel ({u},{v})");
            }
        }
    }
}
