//! Training loop with step learning-rate schedule and validation checkpointing.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::dataset::{load_split, LoadedSample, RelOptions};
use super::evaluate::{evaluate_params, EvalOptions};
use crate::error::{Error, Result};
use crate::io;
use crate::metrics::{loss_with_grad, LossKind};
use crate::nn::checkpoint::{round_to_f32, save_checkpoint, sha256_hex};
use crate::nn::optim::{clip_global_norm, step_lr, AdamW, AdamWConfig};
use crate::nn::{ModelConfig, ModelParams, NetInputs, ParamGrads, RemakeNet, Variant, VariantInputs};
use crate::noise::mix_seed;

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_FORMAT: &str = "remake-run/1";
const SHUFFLE_STREAM: u64 = 0x5_4FF1E;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub dataset: PathBuf,
    pub train_split: String,
    pub val_split: String,
    /// Split the final metrics are computed on.
    pub eval_split: String,
    pub output_dir: PathBuf,
    pub model: ModelConfig,
    pub loss: LossKind,
    pub variant: Variant,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub decay_period: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    /// Global-norm clipping threshold; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub rel: RelOptions,
    pub eval_region: crate::metrics::EvalRegion,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dataset: PathBuf::from("data"),
            train_split: "train".into(),
            val_split: "val".into(),
            eval_split: "test".into(),
            output_dir: PathBuf::from("runs/default"),
            model: ModelConfig::default(),
            loss: LossKind::Global,
            variant: Variant::Full,
            learning_rate: 0.001,
            lr_decay: 0.1,
            decay_period: 15,
            epochs: 40,
            batch_size: 8,
            optimizer: AdamWConfig::default(),
            grad_clip: Some(1.0),
            rel: RelOptions::default(),
            eval_region: Default::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// The `desk` preset: 32×32 input, 200 epochs, small batches.
    pub fn desk() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 4,
            decay_period: 150,
            ..TrainConfig::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "default" => Ok(Self::default()),
            other => Err(Error::Config(format!(
                "unknown preset {other:?} (expected desk|default)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad("learning rate must be positive");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.decay_period == 0 {
            return bad("decay_period must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.lr_decay > 0.0) {
            return bad("lr_decay must be positive");
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return bad("grad_clip must be positive");
        }
        if !(self.rel.noise >= 0.0) {
            return bad("relative-depth noise must be nonnegative");
        }
        self.model.validate()
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        step_lr(self.learning_rate, self.lr_decay, self.decay_period, epoch)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean per-sample training loss, measured before each batch's update.
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    /// Short hashes of the sample ids in each batch, in order.
    pub batch_hashes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub code_version: String,
    pub config: TrainConfig,
    pub epochs: Vec<EpochRecord>,
    pub lr_trace: Vec<f64>,
    /// `best_validation` or `last_epoch`.
    pub selection: String,
    pub selected_epoch: usize,
    /// Global L1 over the training split with the selected parameters.
    pub final_train_global_l1: f64,
    pub final_metrics: Option<Value>,
    pub checkpoint_sha256: String,
    pub wall_clock_s: f64,
}

/// Result of a training run.
pub struct TrainOutcome {
    pub params: ModelParams,
    pub manifest: RunManifest,
    pub checkpoint: PathBuf,
}

fn batch_hash(ids: &[&str]) -> String {
    sha256_hex(ids.join("\n").as_bytes())[..16].to_string()
}

/// Loss and gradient of one sample under the configured regime and variant.
pub fn sample_loss_grad(
    net: &RemakeNet,
    params: &ModelParams,
    s: &LoadedSample,
    variant: Variant,
    loss: LossKind,
) -> Result<(f64, ParamGrads)> {
    let base = NetInputs {
        rgb: &s.rgb,
        mask: &s.mask,
        rel: &s.rel,
        depth: &s.depth_raw,
    };
    let owned = VariantInputs::new(variant, &base);
    let inputs = if variant == Variant::Full {
        base
    } else {
        owned.as_inputs(&s.rgb)
    };
    let (_, value, grads) =
        net.forward_backward(&inputs, params, |pred| loss_with_grad(loss, pred, &s.depth_gt, &s.mask))?;
    Ok((value, grads))
}

/// Mean per-sample loss without gradients.
pub fn mean_loss(
    net: &RemakeNet,
    params: &ModelParams,
    samples: &[LoadedSample],
    variant: Variant,
    loss: LossKind,
) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let inputs = NetInputs {
            rgb: &s.rgb,
            mask: &s.mask,
            rel: &s.rel,
            depth: &s.depth_raw,
        };
        let pred = net.forward_variant(&inputs, params, variant)?;
        total += loss_with_grad(loss, &pred, &s.depth_gt, &s.mask)?.0;
    }
    Ok(total / samples.len() as f64)
}

fn check_resolution(model: &ModelConfig, samples: &[LoadedSample], split: &str) -> Result<()> {
    if let Some(s) = samples.first() {
        if s.depth_gt.shape() != (model.height, model.width) {
            return Err(Error::ShapeMismatch {
                what: format!("{split} split vs model input"),
                expected: (model.height, model.width),
                found: s.depth_gt.shape(),
            });
        }
    }
    Ok(())
}

/// Trains from loaded splits. Writes nothing.
pub fn train_in_memory(
    config: &TrainConfig,
    train: &[LoadedSample],
    val: &[LoadedSample],
) -> Result<(ModelParams, Vec<EpochRecord>, String, usize)> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyRegion(format!(
            "training split {:?} is empty",
            config.train_split
        )));
    }
    check_resolution(&config.model, train, &config.train_split)?;
    check_resolution(&config.model, val, &config.val_split)?;
    let net = RemakeNet::new(&config.model)?;
    let mut params = net.init_params(config.seed);
    let mut opt = AdamW::new(config.optimizer.clone(), &params);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut records = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, ModelParams)> = None;

    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(
            mix_seed(config.seed, SHUFFLE_STREAM),
            epoch as u64,
        )));
        let mut loss_sum = 0.0;
        let mut hashes = Vec::new();
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let ids: Vec<&str> = chunk.iter().map(|&i| train[i].id.as_str()).collect();
            hashes.push(batch_hash(&ids));
            let mut grads = ParamGrads::zeros_like(&params);
            let scale = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let (value, g) = sample_loss_grad(&net, &params, &train[i], config.variant, config.loss)?;
                if !value.is_finite() || !g.all_finite() {
                    return Err(Error::NonFinite(format!(
                        "non-finite loss or gradient at epoch {epoch}, batch {b} (samples {})",
                        ids.join(", ")
                    )));
                }
                loss_sum += value;
                grads.add_scaled(&g, scale);
            }
            if let Some(max) = config.grad_clip {
                clip_global_norm(&mut grads, max);
            }
            opt.step(&mut params, &grads, lr);
            if !params.all_finite() {
                return Err(Error::NonFinite(format!(
                    "parameters became non-finite at epoch {epoch}, batch {b} (samples {})",
                    ids.join(", ")
                )));
            }
        }
        let train_loss = loss_sum / train.len() as f64;
        let val_loss = if val.is_empty() {
            None
        } else {
            Some(mean_loss(&net, &params, val, config.variant, config.loss)?)
        };
        log::info!(
            "epoch {epoch:>4} lr {lr:.2e} train {train_loss:.6} val {}",
            val_loss.map_or("-".to_string(), |v| format!("{v:.6}"))
        );
        if let Some(v) = val_loss {
            if v.is_finite() && best.as_ref().is_none_or(|(b, _, _)| v < *b) {
                best = Some((v, epoch, params.clone()));
            }
        }
        records.push(EpochRecord {
            epoch,
            lr,
            train_loss,
            val_loss,
            batch_hashes: hashes,
        });
    }
    let (selected, selection, epoch) = match best {
        Some((_, e, p)) => (p, "best_validation", e),
        None => (params, "last_epoch", config.epochs - 1),
    };
    Ok((selected, records, selection.to_string(), epoch))
}

/// Trains on `config.dataset`, writes `model.ckpt` and `manifest.json` into
/// `config.output_dir`.
pub fn train(config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let started = Instant::now();
    let train_set = load_split(&config.dataset, &config.train_split, &config.rel)?;
    let val_set = load_split(&config.dataset, &config.val_split, &config.rel)?;
    let (mut params, records, selection, selected_epoch) = train_in_memory(config, &train_set, &val_set)?;
    // Continue with exactly the values the checkpoint stores.
    round_to_f32(&mut params);
    let net = RemakeNet::new(&config.model)?;
    let final_train = mean_loss(&net, &params, &train_set, config.variant, LossKind::Global)?;

    let eval_opts = EvalOptions {
        region: config.eval_region,
        variant: config.variant,
        rel: config.rel,
        ..EvalOptions::default()
    };
    let final_metrics = match load_split(&config.dataset, &config.eval_split, &config.rel) {
        Ok(set) if !set.is_empty() => Some(evaluate_params(&params, &set, &eval_opts)?.aggregate.to_json()),
        Ok(_) | Err(Error::InvalidInput(_)) => None,
        Err(e) => return Err(e),
    };

    let checkpoint = config.output_dir.join(CHECKPOINT_FILE);
    let meta = json!({
        "train_config": config,
        "selection": selection,
        "selected_epoch": selected_epoch,
    });
    let checkpoint_sha256 = save_checkpoint(&checkpoint, &params, &meta)?;
    let manifest = RunManifest {
        format: MANIFEST_FORMAT.into(),
        code_version: env!("CARGO_PKG_VERSION").into(),
        config: config.clone(),
        lr_trace: records.iter().map(|r| r.lr).collect(),
        epochs: records,
        selection,
        selected_epoch,
        final_train_global_l1: final_train,
        final_metrics,
        checkpoint_sha256,
        wall_clock_s: started.elapsed().as_secs_f64(),
    };
    io::write_json(&config.output_dir.join(MANIFEST_FILE), &manifest)?;
    Ok(TrainOutcome {
        params,
        manifest,
        checkpoint,
    })
}

/// Reads the training config stored in a checkpoint's metadata, if any.
pub fn train_config_from_metadata(meta: &Value) -> Option<TrainConfig> {
    serde_json::from_value(meta.get("train_config")?.clone()).ok()
}

pub fn read_manifest(dir: &Path) -> Result<RunManifest> {
    io::read_json(&dir.join(MANIFEST_FILE))
}
