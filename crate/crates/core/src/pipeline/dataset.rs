//! Synthetic dataset builds and split loading.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::grid::{DepthMap, Grid, Mask, RgbImage};
use crate::io;
use crate::noise::mix_seed;
use crate::reldepth::{ingest_external_map, proxy_relative_depth};
use crate::scene::{
    generate_scene, read_sample_input, write_sample, BackgroundPlane, CameraIntrinsics, Primitive, RegionLabel,
    RegionRatios, RgbdSample, SceneSpec, Shape,
};

pub const INDEX_FILE: &str = "index.json";
pub const DATASET_FORMAT: &str = "remake-dataset/1";
const MAX_ATTEMPTS: u64 = 64;
const REL_NOISE_STREAM: u64 = 0x7E1;

/// Distribution of random desk scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub height: usize,
    pub width: usize,
    /// Focal length as a multiple of the image width.
    pub focal_scale: f64,
    /// Inclusive range of transparent primitives per scene.
    pub transparent_objects: [usize; 2],
    pub opaque_objects: [usize; 2],
    /// Range of object center depths, meters.
    pub object_depth: [f64; 2],
    /// Range of object radii / half extents, meters.
    pub object_size: [f64; 2],
    /// Distance from the farthest object surface to the background plane, meters.
    pub background_gap: [f64; 2],
    pub background_tilt_deg: f64,
    pub ratios: RegionRatios,
    pub distortion_amplitude: f64,
    pub min_refraction_offset: f64,
    pub transparent_alpha: f64,
    pub z_max: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            height: 32,
            width: 32,
            focal_scale: 1.0,
            transparent_objects: [1, 2],
            opaque_objects: [0, 1],
            object_depth: [0.45, 0.6],
            object_size: [0.05, 0.09],
            background_gap: [0.05, 0.15],
            background_tilt_deg: 10.0,
            ratios: RegionRatios::TRANSCG,
            distortion_amplitude: 0.05,
            min_refraction_offset: 0.002,
            transparent_alpha: 0.15,
            z_max: 3.0,
        }
    }
}

fn range(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[1] > r[0] {
        rng.gen_range(r[0]..r[1])
    } else {
        r[0]
    }
}

fn pale(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let base = rng.gen_range(0.75..0.95);
    [0, 1, 2].map(|_| (base + rng.gen_range(-0.05..0.05f64)).clamp(0.0, 1.0))
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("dataset spec: {m}")));
        if self.height == 0 || self.width == 0 {
            return bad("empty resolution");
        }
        if self.transparent_objects[0] == 0 || self.transparent_objects[0] > self.transparent_objects[1] {
            return bad("transparent_objects must be a range starting at 1 or more");
        }
        if self.opaque_objects[0] > self.opaque_objects[1] {
            return bad("opaque_objects range is reversed");
        }
        for (name, r) in [
            ("object_depth", self.object_depth),
            ("object_size", self.object_size),
            ("background_gap", self.background_gap),
        ] {
            if !(r[0] > 0.0) || r[1] < r[0] || !r[1].is_finite() {
                return Err(Error::Config(format!("dataset spec: {name} must be a positive range")));
            }
        }
        if !(self.focal_scale > 0.0) {
            return bad("focal_scale must be positive");
        }
        self.ratios.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    /// Draws one scene description. Deterministic in `seed`.
    pub fn sample_scene(&self, seed: u64) -> SceneSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let intrinsics = CameraIntrinsics::centered(self.width, self.height, self.focal_scale);
        let half_w = 0.5 * self.width as f64 / intrinsics.fx;
        let half_h = 0.5 * self.height as f64 / intrinsics.fy;
        let n_t = rng.gen_range(self.transparent_objects[0]..=self.transparent_objects[1]);
        let n_o = rng.gen_range(self.opaque_objects[0]..=self.opaque_objects[1]);
        let mut primitives = Vec::with_capacity(n_t + n_o);
        let mut far = 0.0f64;
        for i in 0..n_t + n_o {
            let transparent = i < n_t;
            let z = range(&mut rng, self.object_depth);
            let size = range(&mut rng, self.object_size) * if transparent { 1.0 } else { 0.6 };
            let center = [
                rng.gen_range(-0.5..0.5) * half_w * z,
                rng.gen_range(-0.5..0.5) * half_h * z,
                z,
            ];
            let kind = if transparent {
                rng.gen_range(0..4)
            } else {
                rng.gen_range(0..3)
            };
            let (shape, extent) = match kind {
                0 => (Shape::Sphere { radius: size }, size),
                2 => {
                    let h = [size, size * rng.gen_range(0.6..1.4), size * rng.gen_range(0.6..1.4)];
                    (
                        Shape::Box { half_extents: h },
                        (h[0] * h[0] + h[1] * h[1] + h[2] * h[2]).sqrt(),
                    )
                }
                _ => {
                    let half_length = size * rng.gen_range(2.0..3.5);
                    (
                        Shape::Cylinder {
                            radius: size * 0.8,
                            half_length,
                        },
                        half_length.hypot(size),
                    )
                }
            };
            let rotation_deg = [
                rng.gen_range(60.0..120.0),
                rng.gen_range(-30.0..30.0),
                rng.gen_range(0.0..180.0),
            ];
            let color = if transparent {
                pale(&mut rng)
            } else {
                [0, 1, 2].map(|_| rng.gen_range(0.05..0.95))
            };
            far = far.max(z + extent.min(size * 1.5));
            primitives.push(Primitive {
                shape,
                center,
                rotation_deg,
                transparent,
                color,
            });
        }
        let depth = (far + range(&mut rng, self.background_gap)).min(self.z_max);
        let tilt = self.background_tilt_deg;
        let background = BackgroundPlane {
            depth,
            tilt_deg: [rng.gen_range(-tilt..=tilt), rng.gen_range(-tilt..=tilt)],
            color_a: [0, 1, 2].map(|_| rng.gen_range(0.1..0.5)),
            color_b: [0, 1, 2].map(|_| rng.gen_range(0.5..0.9)),
            texture_scale: rng.gen_range(4.0..8.0),
        };
        SceneSpec {
            height: self.height,
            width: self.width,
            intrinsics: Some(intrinsics),
            primitives,
            background,
            ratios: self.ratios,
            distortion_amplitude: self.distortion_amplitude,
            min_refraction_offset: self.min_refraction_offset,
            transparent_alpha: self.transparent_alpha,
            region_scale: None,
            z_max: self.z_max,
            seed: mix_seed(seed, 1),
        }
    }

    /// Generates a scene, redrawing when the transparent region is too small to
    /// meet the ratio targets.
    pub fn generate(&self, seed: u64) -> Result<RgbdSample> {
        let mut last = None;
        for attempt in 0..MAX_ATTEMPTS {
            match generate_scene(&self.sample_scene(mix_seed(seed, attempt))) {
                Ok(s) => return Ok(s),
                Err(e @ Error::RatioShortfall(_)) => last = Some(e),
                Err(e) => return Err(e),
            }
        }
        Err(last.expect("at least one attempt"))
    }
}

/// Near/far background pair: training and validation scenes come from `near`,
/// test scenes from `far`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShiftBenchmarkSpec {
    pub near: DatasetSpec,
    pub far: DatasetSpec,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for ShiftBenchmarkSpec {
    fn default() -> Self {
        let near = DatasetSpec::default();
        let far = DatasetSpec {
            background_gap: [0.4, 0.8],
            ..near.clone()
        };
        ShiftBenchmarkSpec {
            near,
            far,
            train: 24,
            val: 4,
            test: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub format: String,
    pub seed: u64,
    pub count: usize,
    pub spec: Value,
    pub splits: BTreeMap<String, Vec<String>>,
}

impl DatasetIndex {
    pub fn load(dir: &Path) -> Result<Self> {
        let index: DatasetIndex = io::read_json(&dir.join(INDEX_FILE))?;
        if index.format != DATASET_FORMAT {
            return Err(Error::MalformedMetadata {
                path: dir.join(INDEX_FILE),
                msg: format!("unknown format tag {:?}", index.format),
            });
        }
        Ok(index)
    }

    pub fn split(&self, name: &str) -> Result<&[String]> {
        self.splits
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::InvalidInput(format!("dataset has no split {name:?}")))
    }
}

/// `(train, val, test)` sizes: 10% validation and test each, rounded.
pub fn split_sizes(count: usize) -> (usize, usize, usize) {
    let tenth = (count as f64 * 0.1).round() as usize;
    let val = tenth.min(count);
    let test = tenth.min(count - val);
    (count - val - test, val, test)
}

fn sample_id(i: usize) -> String {
    format!("sample_{i:04}")
}

fn write_samples(spec: &DatasetSpec, out_dir: &Path, ids: std::ops::Range<usize>, seed: u64) -> Result<Vec<String>> {
    ids.map(|i| {
        let id = sample_id(i);
        let sample = spec.generate(mix_seed(seed, i as u64))?;
        write_sample(&sample, &out_dir.join(&id))?;
        Ok(id)
    })
    .collect()
}

/// Writes `count` samples plus `index.json` with an 80/10/10 split.
pub fn build_dataset(spec: &DatasetSpec, out_dir: &Path, count: usize, seed: u64) -> Result<DatasetIndex> {
    spec.validate()?;
    if count == 0 {
        return Err(Error::Config("dataset count must be at least 1".into()));
    }
    let ids = write_samples(spec, out_dir, 0..count, seed)?;
    let (train, val, _) = split_sizes(count);
    let mut splits = BTreeMap::new();
    splits.insert("train".to_string(), ids[..train].to_vec());
    splits.insert("val".to_string(), ids[train..train + val].to_vec());
    splits.insert("test".to_string(), ids[train + val..].to_vec());
    let index = DatasetIndex {
        format: DATASET_FORMAT.into(),
        seed,
        count,
        spec: serde_json::to_value(spec).expect("serializable"),
        splits,
    };
    io::write_json(&out_dir.join(INDEX_FILE), &index)?;
    Ok(index)
}

/// Builds the near-background / far-background generalization benchmark.
pub fn build_shift_benchmark(spec: &ShiftBenchmarkSpec, out_dir: &Path, seed: u64) -> Result<DatasetIndex> {
    spec.near.validate()?;
    spec.far.validate()?;
    if spec.train == 0 || spec.test == 0 {
        return Err(Error::Config("benchmark needs train and test samples".into()));
    }
    let n_near = spec.train + spec.val;
    let near = write_samples(&spec.near, out_dir, 0..n_near, seed)?;
    let far = write_samples(&spec.far, out_dir, n_near..n_near + spec.test, mix_seed(seed, 0xFA7))?;
    let mut splits = BTreeMap::new();
    splits.insert("train".to_string(), near[..spec.train].to_vec());
    splits.insert("val".to_string(), near[spec.train..].to_vec());
    splits.insert("test".to_string(), far);
    let index = DatasetIndex {
        format: DATASET_FORMAT.into(),
        seed,
        count: n_near + spec.test,
        spec: serde_json::to_value(spec).expect("serializable"),
        splits,
    };
    io::write_json(&out_dir.join(INDEX_FILE), &index)?;
    Ok(index)
}

/// Where the relative-depth input comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RelSource {
    /// Derived from ground truth, with optional smooth noise.
    #[default]
    Proxy,
    /// `relative_depth.png` (or `relative_depth.f32` + sidecar) in each sample directory.
    External,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RelOptions {
    pub source: RelSource,
    pub noise: f64,
}

/// A sample read from disk together with its relative-depth input.
#[derive(Debug, Clone)]
pub struct LoadedSample {
    pub id: String,
    pub rgb: RgbImage,
    pub depth_raw: DepthMap,
    pub depth_gt: DepthMap,
    pub mask: Mask,
    pub regions: Option<Grid<RegionLabel>>,
    pub intrinsics: CameraIntrinsics,
    pub rel: Grid<f64>,
}

/// Locates an external relative-depth map in a sample directory.
pub fn external_rel_path(sample_dir: &Path) -> Option<std::path::PathBuf> {
    ["relative_depth.png", "relative_depth.f32"]
        .into_iter()
        .map(|f| sample_dir.join(f))
        .find(|p| p.exists())
}

/// Relative-depth input for a sample with ground truth.
pub fn relative_input(sample_dir: &Path, gt: &DepthMap, sample_seed: u64, rel: &RelOptions) -> Result<Grid<f64>> {
    match rel.source {
        RelSource::Proxy => Ok(proxy_relative_depth(gt, rel.noise, mix_seed(sample_seed, REL_NOISE_STREAM))?.values),
        RelSource::External => {
            let path = external_rel_path(sample_dir)
                .ok_or_else(|| Error::MissingFile(sample_dir.join("relative_depth.png")))?;
            Ok(ingest_external_map(&path, gt.shape())?.values)
        }
    }
}

pub fn load_sample(dataset: &Path, id: &str, rel: &RelOptions) -> Result<LoadedSample> {
    let dir = dataset.join(id);
    let input = read_sample_input(&dir)?;
    let gt = input
        .depth_gt
        .ok_or_else(|| Error::MissingGroundTruth(dir.join("depth_gt.png")))?;
    let rel = relative_input(&dir, &gt, input.meta.seed, rel)?;
    Ok(LoadedSample {
        id: id.to_string(),
        rgb: input.rgb,
        depth_raw: input.depth_raw,
        depth_gt: gt,
        mask: input.mask,
        regions: input.region_labels,
        intrinsics: input.intrinsics,
        rel,
    })
}

pub fn load_split(dataset: &Path, split: &str, rel: &RelOptions) -> Result<Vec<LoadedSample>> {
    let index = DatasetIndex::load(dataset)?;
    index
        .split(split)?
        .iter()
        .map(|id| load_sample(dataset, id, rel))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_arithmetic() {
        assert_eq!(split_sizes(10), (8, 1, 1));
        assert_eq!(split_sizes(64), (52, 6, 6));
        assert_eq!(split_sizes(1), (1, 0, 0));
        assert_eq!(split_sizes(5), (3, 1, 1));
    }

    #[test]
    fn scenes_are_valid_and_distinct() {
        let spec = DatasetSpec::default();
        let a = spec.generate(1).unwrap();
        let b = spec.generate(2).unwrap();
        a.validate().unwrap();
        assert_ne!(a.depth_gt, b.depth_gt);
        assert_eq!(spec.generate(1).unwrap(), a);
    }

    #[test]
    fn far_backgrounds_are_farther() {
        let b = ShiftBenchmarkSpec::default();
        for seed in 0..10 {
            let near = b.near.sample_scene(seed).background.depth;
            let far = b.far.sample_scene(seed).background.depth;
            assert!(far > near + 0.2);
        }
    }

    #[test]
    fn rejects_bad_specs() {
        let bad = DatasetSpec {
            transparent_objects: [0, 1],
            ..DatasetSpec::default()
        };
        assert!(bad.validate().is_err());
        let dir = tempfile::tempdir().unwrap();
        assert!(build_dataset(&DatasetSpec::default(), dir.path(), 0, 1).is_err());
    }
}
