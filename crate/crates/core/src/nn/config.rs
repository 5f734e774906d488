use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters of the four-branch network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub patch_size: usize,
    pub stages: usize,
    pub embed_dims: Vec<usize>,
    pub depths: Vec<usize>,
    pub num_heads: Vec<usize>,
    /// Attention window side length in tokens.
    pub window: usize,
    /// Hidden width of the encoder MLPs as a multiple of the stage dim.
    pub mlp_ratio: usize,
    pub decoder_blocks: usize,
    pub decoder_hidden: usize,
    /// Channels of the full-resolution map in front of the output head.
    pub head_channels: usize,
    pub z_max: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            height: 32,
            width: 32,
            patch_size: 2,
            stages: 2,
            embed_dims: vec![32, 64],
            depths: vec![2, 2],
            num_heads: vec![2, 4],
            window: 4,
            mlp_ratio: 2,
            decoder_blocks: 4,
            decoder_hidden: 64,
            head_channels: 8,
            z_max: 3.0,
        }
    }
}

impl ModelConfig {
    /// Token grid `(rows, cols)` of stage `s` (0-based).
    pub fn stage_grid(&self, s: usize) -> (usize, usize) {
        let f = self.patch_size << s;
        (self.height / f, self.width / f)
    }

    pub fn last_dim(&self) -> usize {
        *self.embed_dims.last().expect("validated config")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.stages == 0 {
            return bad("stages must be at least 1".into());
        }
        for (name, v) in [
            ("embed_dims", &self.embed_dims),
            ("depths", &self.depths),
            ("num_heads", &self.num_heads),
        ] {
            if v.len() != self.stages {
                return bad(format!("{name} has {} entries for {} stages", v.len(), self.stages));
            }
            if v.contains(&0) {
                return bad(format!("{name} entries must be at least 1"));
            }
        }
        for (s, (&d, &h)) in self.embed_dims.iter().zip(&self.num_heads).enumerate() {
            if d % h != 0 {
                return bad(format!("stage {s}: dim {d} not divisible by {h} heads"));
            }
        }
        for (name, v) in [
            ("patch_size", self.patch_size),
            ("window", self.window),
            ("mlp_ratio", self.mlp_ratio),
            ("decoder_blocks", self.decoder_blocks),
            ("decoder_hidden", self.decoder_hidden),
            ("head_channels", self.head_channels),
        ] {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        if !(self.z_max > 0.0) || !self.z_max.is_finite() {
            return bad("z_max must be positive".into());
        }
        let unit = self.patch_size << (self.stages - 1);
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(unit) || !self.width.is_multiple_of(unit)
        {
            return bad(format!(
                "input {}x{} must be a positive multiple of patch·2^(stages−1) = {unit}",
                self.height, self.width
            ));
        }
        for s in 0..self.stages {
            let (gh, gw) = self.stage_grid(s);
            if self.window > gh || self.window > gw {
                return bad(format!(
                    "window {} larger than stage-{s} token grid {gh}x{gw}",
                    self.window
                ));
            }
            if gh % self.window != 0 || gw % self.window != 0 {
                return bad(format!(
                    "stage-{s} token grid {gh}x{gw} not divisible by window {}",
                    self.window
                ));
            }
        }
        Ok(())
    }
}
