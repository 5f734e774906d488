//! The four-branch completion network.
//!
//! * mask branch: RGB ⊕ mask (4 channels) → patch embedding → windowed
//!   self-attention stages with patch merging in between;
//! * relative branch: the same topology over the 1-channel relative depth map,
//!   with its own weights;
//! * depth branch: `depth / z_max` patchified, a per-patch MLP, average-pooled
//!   to the coarsest grid;
//! * decoder: coarsest mask/relative/depth features concatenated and
//!   projected, residual MLP blocks, nearest upsampling with projected skips
//!   from the finer encoder stages, pixel shuffle to full resolution and a
//!   1-channel linear head scaled by `z_max`.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::params::{ModelParams, ParamGrads, Tensor};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::grid::{ensure_same_shape, DepthMap, Grid, Mask, RgbImage};

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: usize,
    b: Option<usize>,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    g: usize,
    b: usize,
}

#[derive(Debug, Clone)]
struct Block {
    ln1: Norm,
    qkv: Linear,
    rel_bias: usize,
    proj: Linear,
    ln2: Norm,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Debug, Clone)]
struct Merge {
    norm: Norm,
    reduce: Linear,
}

#[derive(Debug, Clone)]
struct Encoder {
    embed: Linear,
    embed_norm: Norm,
    stages: Vec<(Vec<Block>, Option<Merge>)>,
}

#[derive(Debug, Clone)]
struct DepthEncoder {
    fc1: Linear,
    fc2: Linear,
}

#[derive(Debug, Clone)]
struct DecoderBlock {
    norm: Norm,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Debug, Clone)]
struct Decoder {
    fuse: Linear,
    blocks: Vec<DecoderBlock>,
    /// Skip projections for stages `0..stages-1`, finest first.
    skips: Vec<Linear>,
    expand: Linear,
    head: Linear,
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Uniform(f64),
    Zeros,
    Ones,
}

#[derive(Debug, Clone)]
struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

#[derive(Default)]
struct LayoutBuilder {
    specs: Vec<ParamSpec>,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.specs.push(ParamSpec { name, shape, init });
        self.specs.len() - 1
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize, bias: bool) -> Linear {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = self.add(format!("{prefix}.weight"), vec![fan_in, fan_out], Init::Uniform(bound));
        let b = bias.then(|| self.add(format!("{prefix}.bias"), vec![fan_out], Init::Zeros));
        Linear { w, b }
    }

    fn norm(&mut self, prefix: &str, dim: usize) -> Norm {
        Norm {
            g: self.add(format!("{prefix}.gamma"), vec![dim], Init::Ones),
            b: self.add(format!("{prefix}.beta"), vec![dim], Init::Zeros),
        }
    }

    fn encoder(&mut self, prefix: &str, in_ch: usize, c: &ModelConfig) -> Encoder {
        let p2 = c.patch_size * c.patch_size;
        let d0 = c.embed_dims[0];
        let embed = self.linear(&format!("{prefix}.patch_embed"), p2 * in_ch, d0, true);
        let embed_norm = self.norm(&format!("{prefix}.patch_norm"), d0);
        let table = (2 * c.window - 1) * (2 * c.window - 1);
        let mut stages = Vec::new();
        for s in 0..c.stages {
            let d = c.embed_dims[s];
            let blocks = (0..c.depths[s])
                .map(|b| {
                    let p = format!("{prefix}.stage{s}.block{b}");
                    Block {
                        ln1: self.norm(&format!("{p}.norm1"), d),
                        qkv: self.linear(&format!("{p}.attn.qkv"), d, 3 * d, true),
                        rel_bias: self.add(
                            format!("{p}.attn.rel_pos_bias"),
                            vec![table, c.num_heads[s]],
                            Init::Zeros,
                        ),
                        proj: self.linear(&format!("{p}.attn.proj"), d, d, true),
                        ln2: self.norm(&format!("{p}.norm2"), d),
                        fc1: self.linear(&format!("{p}.mlp.fc1"), d, c.mlp_ratio * d, true),
                        fc2: self.linear(&format!("{p}.mlp.fc2"), c.mlp_ratio * d, d, true),
                    }
                })
                .collect();
            let merge = (s + 1 < c.stages).then(|| Merge {
                norm: self.norm(&format!("{prefix}.stage{s}.merge.norm"), 4 * d),
                reduce: self.linear(
                    &format!("{prefix}.stage{s}.merge.reduce"),
                    4 * d,
                    c.embed_dims[s + 1],
                    false,
                ),
            });
            stages.push((blocks, merge));
        }
        Encoder {
            embed,
            embed_norm,
            stages,
        }
    }
}

#[derive(Debug)]
struct StagePlan {
    grid: (usize, usize),
    /// `[N, 3d]` token order → window order.
    qkv_to_windows: Arc<Vec<u32>>,
    /// `[N, d]` window order → token order.
    from_windows: Arc<Vec<u32>>,
    /// `[N, d]` → `[N/4, 4d]` into the next stage.
    merge: Option<Arc<Vec<u32>>>,
}

#[derive(Debug)]
struct Plan {
    patchify_rgbm: Arc<Vec<u32>>,
    patchify_single: Arc<Vec<u32>>,
    stages: Vec<StagePlan>,
    rel_index: Arc<Vec<u32>>,
    depth_pool: Arc<Vec<u32>>,
    pool_k: usize,
    /// Nearest ×2 upsampling of `[N_{s+1}, hidden]` to stage `s`, for `s < stages-1`.
    upsample: Vec<Arc<Vec<u32>>>,
    pixel_shuffle: Arc<Vec<u32>>,
}

fn patchify_index(h: usize, w: usize, p: usize, c: usize) -> Vec<u32> {
    let mut idx = Vec::with_capacity(h * w * c);
    for ty in 0..h / p {
        for tx in 0..w / p {
            for py in 0..p {
                for px in 0..p {
                    for ch in 0..c {
                        idx.push((((ty * p + py) * w + tx * p + px) * c + ch) as u32);
                    }
                }
            }
        }
    }
    idx
}

/// Window-order row `r` → token index.
fn window_perm(gh: usize, gw: usize, win: usize) -> Vec<usize> {
    let mut perm = Vec::with_capacity(gh * gw);
    for wy in 0..gh / win {
        for wx in 0..gw / win {
            for iy in 0..win {
                for ix in 0..win {
                    perm.push((wy * win + iy) * gw + wx * win + ix);
                }
            }
        }
    }
    perm
}

fn rows_index(rows: impl IntoIterator<Item = usize>, cols: usize) -> Vec<u32> {
    rows.into_iter()
        .flat_map(|r| (0..cols).map(move |c| (r * cols + c) as u32))
        .collect()
}

fn merge_index(gh: usize, gw: usize, d: usize) -> Vec<u32> {
    let mut idx = Vec::with_capacity(gh * gw * d);
    for i in 0..gh / 2 {
        for j in 0..gw / 2 {
            for (dy, dx) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                let t = (2 * i + dy) * gw + 2 * j + dx;
                idx.extend((0..d).map(|c| (t * d + c) as u32));
            }
        }
    }
    idx
}

fn pool_index(gh: usize, gw: usize, f: usize, d: usize) -> Vec<u32> {
    let mut idx = Vec::with_capacity(gh * gw * d);
    for i in 0..gh / f {
        for j in 0..gw / f {
            for c in 0..d {
                for a in 0..f {
                    for b in 0..f {
                        idx.push((((i * f + a) * gw + j * f + b) * d + c) as u32);
                    }
                }
            }
        }
    }
    idx
}

fn upsample_index(gh_small: usize, gw_small: usize, d: usize) -> Vec<u32> {
    let rows = (0..2 * gh_small).flat_map(|y| (0..2 * gw_small).map(move |x| (y / 2) * gw_small + x / 2));
    rows_index(rows, d)
}

fn pixel_shuffle_index(h: usize, w: usize, p: usize, c: usize) -> Vec<u32> {
    let w1 = w / p;
    let src_cols = p * p * c;
    let mut idx = Vec::with_capacity(h * w * c);
    for y in 0..h {
        for x in 0..w {
            let token = (y / p) * w1 + x / p;
            let sub = (y % p) * p + x % p;
            idx.extend((0..c).map(|ch| (token * src_cols + sub * c + ch) as u32));
        }
    }
    idx
}

fn relative_position_index(win: usize) -> Vec<u32> {
    let t = win * win;
    let span = 2 * win - 1;
    let mut idx = Vec::with_capacity(t * t);
    for i in 0..t {
        for j in 0..t {
            let dy = (i / win) as isize - (j / win) as isize + win as isize - 1;
            let dx = (i % win) as isize - (j % win) as isize + win as isize - 1;
            idx.push((dy as usize * span + dx as usize) as u32);
        }
    }
    idx
}

impl Plan {
    fn new(c: &ModelConfig) -> Self {
        let stages = (0..c.stages)
            .map(|s| {
                let (gh, gw) = c.stage_grid(s);
                let d = c.embed_dims[s];
                let perm = window_perm(gh, gw, c.window);
                let mut inverse = vec![0; perm.len()];
                for (r, &t) in perm.iter().enumerate() {
                    inverse[t] = r;
                }
                StagePlan {
                    grid: (gh, gw),
                    qkv_to_windows: Arc::new(rows_index(perm.iter().copied(), 3 * d)),
                    from_windows: Arc::new(rows_index(inverse, d)),
                    merge: (s + 1 < c.stages).then(|| Arc::new(merge_index(gh, gw, d))),
                }
            })
            .collect();
        let (h1, w1) = c.stage_grid(0);
        let f = 1 << (c.stages - 1);
        Plan {
            patchify_rgbm: Arc::new(patchify_index(c.height, c.width, c.patch_size, 4)),
            patchify_single: Arc::new(patchify_index(c.height, c.width, c.patch_size, 1)),
            stages,
            rel_index: Arc::new(relative_position_index(c.window)),
            depth_pool: Arc::new(pool_index(h1, w1, f, c.last_dim())),
            pool_k: f * f,
            upsample: (0..c.stages - 1)
                .map(|s| {
                    let (gh, gw) = c.stage_grid(s + 1);
                    Arc::new(upsample_index(gh, gw, c.decoder_hidden))
                })
                .collect(),
            pixel_shuffle: Arc::new(pixel_shuffle_index(c.height, c.width, c.patch_size, c.head_channels)),
        }
    }
}

/// A feature grid `height × width × channels`, channel-last.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FeatureGrid {
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }
}

/// Encoder outputs consumed by the decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub f_mask: Vec<FeatureGrid>,
    pub f_rel: Vec<FeatureGrid>,
    pub f_depth: FeatureGrid,
}

/// Network inputs for one sample.
#[derive(Debug, Clone, Copy)]
pub struct NetInputs<'a> {
    pub rgb: &'a RgbImage,
    pub mask: &'a Mask,
    pub rel: &'a Grid<f64>,
    pub depth: &'a DepthMap,
}

/// Input ablations. Each keeps the architecture intact and neutralizes an input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    /// Zero mask channel and constant 0.5 relative map.
    Blank,
    /// Constant 0.5 relative map.
    NoRel,
    /// Zero mask channel.
    NoMask,
    /// Raw depth zeroed inside the mask before the depth branch.
    NoTransDepth,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::Blank,
        Variant::NoRel,
        Variant::NoMask,
        Variant::NoTransDepth,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::Blank => "blank",
            Variant::NoRel => "no-rel",
            Variant::NoMask => "no-mask",
            Variant::NoTransDepth => "no-trans-depth",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

/// Owned inputs after a variant has neutralized some of them.
#[derive(Debug, Clone)]
pub struct VariantInputs {
    pub mask: Mask,
    pub rel: Grid<f64>,
    pub depth: DepthMap,
}

impl VariantInputs {
    pub fn new(variant: Variant, inputs: &NetInputs<'_>) -> Self {
        let (h, w) = inputs.depth.shape();
        let zero_mask = || Grid::filled(h, w, 0u8);
        let neutral_rel = || Grid::filled(h, w, 0.5);
        let (mask, rel, depth) = match variant {
            Variant::Full => (inputs.mask.clone(), inputs.rel.clone(), inputs.depth.clone()),
            Variant::Blank => (zero_mask(), neutral_rel(), inputs.depth.clone()),
            Variant::NoRel => (inputs.mask.clone(), neutral_rel(), inputs.depth.clone()),
            Variant::NoMask => (zero_mask(), inputs.rel.clone(), inputs.depth.clone()),
            Variant::NoTransDepth => {
                let mut masked = inputs.depth.clone();
                for (d, &m) in masked.data.iter_mut().zip(&inputs.mask.data) {
                    *d *= (1 - m) as f64;
                }
                (inputs.mask.clone(), inputs.rel.clone(), masked)
            }
        };
        VariantInputs { mask, rel, depth }
    }

    pub fn as_inputs<'a>(&'a self, rgb: &'a RgbImage) -> NetInputs<'a> {
        NetInputs {
            rgb,
            mask: &self.mask,
            rel: &self.rel,
            depth: &self.depth,
        }
    }
}

/// Network topology, parameter layout and precomputed index maps for one config.
pub struct RemakeNet {
    config: ModelConfig,
    layout: Vec<ParamSpec>,
    mask_enc: Encoder,
    rel_enc: Encoder,
    depth_enc: DepthEncoder,
    decoder: Decoder,
    plan: Plan,
}

struct Traced {
    f_mask: Vec<Var>,
    f_rel: Vec<Var>,
    f_depth: Var,
}

impl RemakeNet {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = config;
        let mut lb = LayoutBuilder::default();
        let mask_enc = lb.encoder("mask_encoder", 4, c);
        let rel_enc = lb.encoder("rel_encoder", 1, c);
        let p2 = c.patch_size * c.patch_size;
        let depth_enc = DepthEncoder {
            fc1: lb.linear("depth_encoder.fc1", p2, c.embed_dims[0], true),
            fc2: lb.linear("depth_encoder.fc2", c.embed_dims[0], c.last_dim(), true),
        };
        let hid = c.decoder_hidden;
        let decoder = Decoder {
            fuse: lb.linear("decoder.fuse", 3 * c.last_dim(), hid, true),
            blocks: (0..c.decoder_blocks)
                .map(|b| DecoderBlock {
                    norm: lb.norm(&format!("decoder.block{b}.norm"), hid),
                    fc1: lb.linear(&format!("decoder.block{b}.fc1"), hid, hid, true),
                    fc2: lb.linear(&format!("decoder.block{b}.fc2"), hid, hid, true),
                })
                .collect(),
            skips: (0..c.stages - 1)
                .map(|s| lb.linear(&format!("decoder.skip{s}"), 2 * c.embed_dims[s], hid, true))
                .collect(),
            expand: lb.linear("decoder.expand", hid, p2 * c.head_channels, true),
            head: lb.linear("decoder.head", c.head_channels, 1, true),
        };
        Ok(RemakeNet {
            config: config.clone(),
            layout: lb.specs,
            mask_enc,
            rel_enc,
            depth_enc,
            decoder,
            plan: Plan::new(c),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// `(name, shape)` of every parameter tensor in storage order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.layout.iter().map(|s| (s.name.clone(), s.shape.clone())).collect()
    }

    /// Uniform `±1/sqrt(fan_in)` weights, zero biases, unit norm gains.
    pub fn init_params(&self, seed: u64) -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = self
            .layout
            .iter()
            .map(|spec| {
                let n: usize = spec.shape.iter().product();
                let data = match spec.init {
                    Init::Uniform(bound) => (0..n).map(|_| rng.gen_range(-bound..bound)).collect(),
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                };
                Tensor {
                    name: spec.name.clone(),
                    shape: spec.shape.clone(),
                    data,
                }
            })
            .collect();
        ModelParams {
            config: self.config.clone(),
            tensors,
        }
    }

    /// Verifies that `params` has exactly this network's layout.
    pub fn check_params(&self, params: &ModelParams) -> Result<()> {
        if params.tensors.len() != self.layout.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                self.layout.len(),
                params.tensors.len()
            )));
        }
        for (spec, t) in self.layout.iter().zip(&params.tensors) {
            if spec.name != t.name || spec.shape != t.shape || t.data.len() != t.numel() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} {:?} does not match expected {} {:?}",
                    t.name, t.shape, spec.name, spec.shape
                )));
            }
        }
        Ok(())
    }

    fn check_shape(&self, what: &str, shape: (usize, usize)) -> Result<()> {
        ensure_same_shape(what, (self.config.height, self.config.width), shape)
    }

    fn validate_rgb_mask(&self, rgb: &RgbImage, mask: &Mask) -> Result<()> {
        self.check_shape("rgb", rgb.shape())?;
        self.check_shape("mask", mask.shape())?;
        if rgb.data.iter().flatten().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::InvalidInput("rgb values must lie in [0,1]".into()));
        }
        if mask.data.iter().any(|&m| m > 1) {
            return Err(Error::InvalidInput("mask values must be 0 or 1".into()));
        }
        Ok(())
    }

    fn validate_rel(&self, rel: &Grid<f64>) -> Result<()> {
        self.check_shape("relative depth", rel.shape())?;
        if rel.data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidInput("relative depth must lie in [0,1]".into()));
        }
        Ok(())
    }

    fn validate_depth(&self, depth: &DepthMap) -> Result<()> {
        self.check_shape("depth", depth.shape())?;
        if depth.data.iter().any(|d| !d.is_finite() || *d < 0.0) {
            return Err(Error::InvalidInput("depth must be finite and nonnegative".into()));
        }
        Ok(())
    }

    fn validate_inputs(&self, inputs: &NetInputs<'_>) -> Result<()> {
        self.validate_rgb_mask(inputs.rgb, inputs.mask)?;
        self.validate_rel(inputs.rel)?;
        self.validate_depth(inputs.depth)
    }

    fn linear(tape: &mut Tape<'_>, x: Var, l: Linear) -> Var {
        let w = tape.param(l.w);
        let y = tape.matmul(x, w);
        match l.b {
            Some(b) => {
                let b = tape.param(b);
                tape.add_bias(y, b)
            }
            None => y,
        }
    }

    fn norm(tape: &mut Tape<'_>, x: Var, n: Norm) -> Var {
        let g = tape.param(n.g);
        let b = tape.param(n.b);
        tape.layer_norm(x, g, b)
    }

    fn encode(&self, tape: &mut Tape<'_>, enc: &Encoder, input: Var, in_ch: usize) -> Vec<Var> {
        let c = &self.config;
        let p2 = c.patch_size * c.patch_size;
        let (h1, w1) = c.stage_grid(0);
        let index = if in_ch == 4 {
            self.plan.patchify_rgbm.clone()
        } else {
            self.plan.patchify_single.clone()
        };
        let patches = tape.gather(input, index, 1, h1 * w1, p2 * in_ch);
        let x = Self::linear(tape, patches, enc.embed);
        let mut x = Self::norm(tape, x, enc.embed_norm);
        let mut feats = Vec::with_capacity(c.stages);
        for (s, (blocks, merge)) in enc.stages.iter().enumerate() {
            let sp = &self.plan.stages[s];
            let n = sp.grid.0 * sp.grid.1;
            let d = c.embed_dims[s];
            for blk in blocks {
                let h = Self::norm(tape, x, blk.ln1);
                let qkv = Self::linear(tape, h, blk.qkv);
                let qkv = tape.gather(qkv, sp.qkv_to_windows.clone(), 1, n, 3 * d);
                let bias = tape.param(blk.rel_bias);
                let a = tape.window_attention(
                    qkv,
                    bias,
                    c.num_heads[s],
                    c.window * c.window,
                    self.plan.rel_index.clone(),
                );
                let a = tape.gather(a, sp.from_windows.clone(), 1, n, d);
                let a = Self::linear(tape, a, blk.proj);
                x = tape.add(x, a);
                let h = Self::norm(tape, x, blk.ln2);
                let h = Self::linear(tape, h, blk.fc1);
                let h = tape.gelu(h);
                let h = Self::linear(tape, h, blk.fc2);
                x = tape.add(x, h);
            }
            feats.push(x);
            if let (Some(m), Some(index)) = (merge, &sp.merge) {
                let merged = tape.gather(x, index.clone(), 1, n / 4, 4 * d);
                let merged = Self::norm(tape, merged, m.norm);
                x = Self::linear(tape, merged, m.reduce);
            }
        }
        feats
    }

    fn mask_input(tape: &mut Tape<'_>, rgb: &RgbImage, mask: &Mask) -> Var {
        let mut data = Vec::with_capacity(rgb.len() * 4);
        for (px, &m) in rgb.data.iter().zip(&mask.data) {
            data.extend_from_slice(px);
            data.push(m as f64);
        }
        tape.input(rgb.len(), 4, data)
    }

    fn encode_depth(&self, tape: &mut Tape<'_>, depth: &DepthMap) -> Var {
        let c = &self.config;
        let (h1, w1) = c.stage_grid(0);
        let (hs, ws) = c.stage_grid(c.stages - 1);
        let scaled = depth.data.iter().map(|d| d / c.z_max).collect();
        let input = tape.input(depth.len(), 1, scaled);
        let p2 = c.patch_size * c.patch_size;
        let patches = tape.gather(input, self.plan.patchify_single.clone(), 1, h1 * w1, p2);
        let h = Self::linear(tape, patches, self.depth_enc.fc1);
        let h = tape.gelu(h);
        let h = Self::linear(tape, h, self.depth_enc.fc2);
        tape.gather(h, self.plan.depth_pool.clone(), self.plan.pool_k, hs * ws, c.last_dim())
    }

    fn decode(&self, tape: &mut Tape<'_>, t: &Traced) -> Var {
        let c = &self.config;
        let dec = &self.decoder;
        let last = c.stages - 1;
        let fused = tape.concat_cols(&[t.f_mask[last], t.f_rel[last], t.f_depth]);
        let mut x = Self::linear(tape, fused, dec.fuse);
        for blk in &dec.blocks {
            let h = Self::norm(tape, x, blk.norm);
            let h = Self::linear(tape, h, blk.fc1);
            let h = tape.gelu(h);
            let h = Self::linear(tape, h, blk.fc2);
            x = tape.add(x, h);
        }
        for s in (0..last).rev() {
            let (gh, gw) = c.stage_grid(s);
            let up = tape.gather(x, self.plan.upsample[s].clone(), 1, gh * gw, c.decoder_hidden);
            let skip_in = tape.concat_cols(&[t.f_mask[s], t.f_rel[s]]);
            let skip = Self::linear(tape, skip_in, dec.skips[s]);
            x = tape.add(up, skip);
        }
        let x = tape.gelu(x);
        let x = Self::linear(tape, x, dec.expand);
        let x = tape.gather(
            x,
            self.plan.pixel_shuffle.clone(),
            1,
            c.height * c.width,
            c.head_channels,
        );
        let x = tape.gelu(x);
        let x = Self::linear(tape, x, dec.head);
        tape.scale(x, c.z_max)
    }

    fn trace(&self, tape: &mut Tape<'_>, inputs: &NetInputs<'_>) -> (Traced, Var) {
        let m = Self::mask_input(tape, inputs.rgb, inputs.mask);
        let f_mask = self.encode(tape, &self.mask_enc, m, 4);
        let r = tape.input(inputs.rel.len(), 1, inputs.rel.data.clone());
        let f_rel = self.encode(tape, &self.rel_enc, r, 1);
        let f_depth = self.encode_depth(tape, inputs.depth);
        let traced = Traced { f_mask, f_rel, f_depth };
        let out = self.decode(tape, &traced);
        (traced, out)
    }

    fn grid_of(&self, tape: &Tape<'_>, v: Var, stage: usize) -> FeatureGrid {
        let (gh, gw) = self.config.stage_grid(stage);
        let (rows, cols) = tape.shape(v);
        debug_assert_eq!(rows, gh * gw);
        FeatureGrid {
            height: gh,
            width: gw,
            channels: cols,
            data: tape.value(v).to_vec(),
        }
    }

    fn to_depth(&self, tape: &Tape<'_>, out: Var) -> DepthMap {
        Grid {
            height: self.config.height,
            width: self.config.width,
            data: tape.value(out).to_vec(),
        }
    }

    pub fn encode_mask_branch(&self, rgb: &RgbImage, mask: &Mask, params: &ModelParams) -> Result<Vec<FeatureGrid>> {
        self.validate_rgb_mask(rgb, mask)?;
        let mut tape = Tape::new(params);
        let m = Self::mask_input(&mut tape, rgb, mask);
        let feats = self.encode(&mut tape, &self.mask_enc, m, 4);
        Ok(feats
            .iter()
            .enumerate()
            .map(|(s, &v)| self.grid_of(&tape, v, s))
            .collect())
    }

    pub fn encode_relative_branch(&self, rel: &Grid<f64>, params: &ModelParams) -> Result<Vec<FeatureGrid>> {
        self.validate_rel(rel)?;
        let mut tape = Tape::new(params);
        let r = tape.input(rel.len(), 1, rel.data.clone());
        let feats = self.encode(&mut tape, &self.rel_enc, r, 1);
        Ok(feats
            .iter()
            .enumerate()
            .map(|(s, &v)| self.grid_of(&tape, v, s))
            .collect())
    }

    pub fn encode_depth_branch(&self, depth: &DepthMap, params: &ModelParams) -> Result<FeatureGrid> {
        self.validate_depth(depth)?;
        let mut tape = Tape::new(params);
        let v = self.encode_depth(&mut tape, depth);
        Ok(self.grid_of(&tape, v, self.config.stages - 1))
    }

    pub fn fuse_and_decode(&self, features: &FeatureSet, params: &ModelParams) -> Result<DepthMap> {
        let c = &self.config;
        let check = |what: &str, f: &FeatureGrid, s: usize, ch: usize| -> Result<()> {
            let (gh, gw) = c.stage_grid(s);
            if f.shape() != (gh, gw, ch) || f.data.len() != gh * gw * ch {
                return Err(Error::InvalidInput(format!(
                    "{what} stage {s}: feature shape {:?}, expected {:?}",
                    f.shape(),
                    (gh, gw, ch)
                )));
            }
            Ok(())
        };
        if features.f_mask.len() != c.stages || features.f_rel.len() != c.stages {
            return Err(Error::InvalidInput(format!(
                "expected {} encoder stages per branch",
                c.stages
            )));
        }
        for s in 0..c.stages {
            check("mask features", &features.f_mask[s], s, c.embed_dims[s])?;
            check("relative features", &features.f_rel[s], s, c.embed_dims[s])?;
        }
        check("depth features", &features.f_depth, c.stages - 1, c.last_dim())?;
        let mut tape = Tape::new(params);
        let mut leaf = |f: &FeatureGrid| tape.input(f.height * f.width, f.channels, f.data.clone());
        let f_mask: Vec<Var> = features.f_mask.iter().map(&mut leaf).collect();
        let f_rel: Vec<Var> = features.f_rel.iter().map(&mut leaf).collect();
        let f_depth = leaf(&features.f_depth);
        let traced = Traced { f_mask, f_rel, f_depth };
        let out = self.decode(&mut tape, &traced);
        Ok(self.to_depth(&tape, out))
    }

    /// Completed depth `D_o` in meters (unclamped).
    pub fn forward(&self, inputs: &NetInputs<'_>, params: &ModelParams) -> Result<DepthMap> {
        self.validate_inputs(inputs)?;
        let mut tape = Tape::new(params);
        let (_, out) = self.trace(&mut tape, inputs);
        Ok(self.to_depth(&tape, out))
    }

    /// Forward pass that also returns every branch's features.
    pub fn forward_features(&self, inputs: &NetInputs<'_>, params: &ModelParams) -> Result<(FeatureSet, DepthMap)> {
        self.validate_inputs(inputs)?;
        let mut tape = Tape::new(params);
        let (t, out) = self.trace(&mut tape, inputs);
        let set = FeatureSet {
            f_mask: t
                .f_mask
                .iter()
                .enumerate()
                .map(|(s, &v)| self.grid_of(&tape, v, s))
                .collect(),
            f_rel: t
                .f_rel
                .iter()
                .enumerate()
                .map(|(s, &v)| self.grid_of(&tape, v, s))
                .collect(),
            f_depth: self.grid_of(&tape, t.f_depth, self.config.stages - 1),
        };
        Ok((set, self.to_depth(&tape, out)))
    }

    pub fn forward_variant(&self, inputs: &NetInputs<'_>, params: &ModelParams, variant: Variant) -> Result<DepthMap> {
        if variant == Variant::Full {
            return self.forward(inputs, params);
        }
        let owned = VariantInputs::new(variant, inputs);
        self.forward(&owned.as_inputs(inputs.rgb), params)
    }

    /// Forward plus reverse pass. `loss` maps the prediction to a scalar and
    /// its gradient with respect to every output pixel.
    pub fn forward_backward<F>(
        &self,
        inputs: &NetInputs<'_>,
        params: &ModelParams,
        loss: F,
    ) -> Result<(DepthMap, f64, ParamGrads)>
    where
        F: FnOnce(&DepthMap) -> Result<(f64, Vec<f64>)>,
    {
        self.validate_inputs(inputs)?;
        let mut tape = Tape::new(params);
        let (_, out) = self.trace(&mut tape, inputs);
        let pred = self.to_depth(&tape, out);
        let (value, grad) = loss(&pred)?;
        let grads = tape.backward(out, &grad);
        Ok((pred, value, grads))
    }
}

/// Convenience wrapper: builds the network for `config` and initializes it.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    Ok(RemakeNet::new(config)?.init_params(seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_maps_are_permutations() {
        let perm = window_perm(8, 8, 4);
        let mut sorted = perm.clone();
        sorted.sort();
        assert_eq!(sorted, (0..64).collect::<Vec<_>>());
        // The first window covers the top-left 4×4 block.
        assert_eq!(&perm[..5], &[0, 1, 2, 3, 8]);

        let patch = patchify_index(4, 4, 2, 1);
        assert_eq!(&patch[..4], &[0, 1, 4, 5]);
        let shuffle = pixel_shuffle_index(4, 4, 2, 1);
        // Shuffling the patchified image restores pixel order.
        let restored: Vec<u32> = shuffle.iter().map(|&i| patch[i as usize]).collect();
        assert_eq!(restored, (0..16).collect::<Vec<u32>>());
    }

    #[test]
    fn relative_positions_are_symmetric_about_center() {
        let idx = relative_position_index(3);
        let center = (2 * 3 - 1) * 2 + 2;
        for i in 0..9 {
            assert_eq!(idx[i * 9 + i] as usize, center);
        }
        assert_eq!(idx.iter().copied().max().unwrap() as usize, 24);
    }

    #[test]
    fn pool_and_merge_cover_each_source_once() {
        let pool = pool_index(4, 4, 2, 3);
        let mut seen = pool.clone();
        seen.sort();
        assert_eq!(seen, (0..48).collect::<Vec<u32>>());
        let merge = merge_index(4, 4, 3);
        let mut seen = merge.clone();
        seen.sort();
        assert_eq!(seen, (0..48).collect::<Vec<u32>>());
    }
}
