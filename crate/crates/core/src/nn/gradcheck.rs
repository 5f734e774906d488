//! Finite-difference verification of the analytic parameter gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::model::{NetInputs, RemakeNet};
use super::params::ModelParams;
use crate::error::Result;
use crate::grid::{DepthMap, Grid, Mask, RgbImage};

/// Agreement between analytic and numeric gradients for one parameter tensor.
#[derive(Debug, Clone)]
pub struct GroupCheck {
    pub name: String,
    pub coords: usize,
    /// `‖g_analytic − g_numeric‖ / max(‖g_analytic‖ + ‖g_numeric‖, floor)` over the sampled coordinates.
    pub rel_error: f64,
    pub analytic_norm: f64,
}

/// Random inputs covering the full value range, including missing depth.
pub fn random_inputs(config: &ModelConfig, seed: u64) -> (RgbImage, Mask, Grid<f64>, DepthMap) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (config.height, config.width);
    let rgb = Grid::from_fn(h, w, |_, _| [rng.gen(), rng.gen(), rng.gen()]);
    let mask = Grid::from_fn(h, w, |_, _| rng.gen_bool(0.4) as u8);
    let rel = Grid::from_fn(h, w, |_, _| rng.gen());
    let depth = Grid::from_fn(h, w, |_, _| {
        if rng.gen_bool(0.1) {
            0.0
        } else {
            rng.gen_range(0.2..config.z_max)
        }
    });
    (rgb, mask, rel, depth)
}

/// Smooth scalar objective `Σ a_i·y_i + ½ Σ y_i²` with seeded weights `a`.
fn objective(weights: &[f64], pred: &DepthMap) -> (f64, Vec<f64>) {
    let value = weights.iter().zip(&pred.data).map(|(a, y)| a * y + 0.5 * y * y).sum();
    let grad = weights.iter().zip(&pred.data).map(|(a, y)| a + y).collect();
    (value, grad)
}

/// Checks `coords_per_tensor` random coordinates of every tensor with central
/// differences of step `step`. Parameters are perturbed away from their
/// initialization first so zero-initialized tensors get nontrivial gradients.
pub fn check_gradients(
    config: &ModelConfig,
    seed: u64,
    coords_per_tensor: usize,
    step: f64,
) -> Result<Vec<GroupCheck>> {
    let net = RemakeNet::new(config)?;
    let mut params = net.init_params(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6AD_C4EC);
    for t in &mut params.tensors {
        for v in &mut t.data {
            *v += rng.gen_range(-0.1..0.1);
        }
    }
    let (rgb, mask, rel, depth) = random_inputs(config, seed.wrapping_add(1));
    let inputs = NetInputs {
        rgb: &rgb,
        mask: &mask,
        rel: &rel,
        depth: &depth,
    };
    let weights: Vec<f64> = (0..config.height * config.width)
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    let (_, _, grads) = net.forward_backward(&inputs, &params, |p| Ok(objective(&weights, p)))?;

    let eval = |p: &ModelParams| -> Result<f64> { Ok(objective(&weights, &net.forward(&inputs, p)?).0) };
    let mut report = Vec::with_capacity(params.tensors.len());
    for ti in 0..params.tensors.len() {
        let n = params.tensors[ti].data.len();
        let picks: Vec<usize> = if n <= coords_per_tensor {
            (0..n).collect()
        } else {
            (0..coords_per_tensor).map(|_| rng.gen_range(0..n)).collect()
        };
        let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
        for &j in &picks {
            let orig = params.tensors[ti].data[j];
            params.tensors[ti].data[j] = orig + step;
            let up = eval(&params)?;
            params.tensors[ti].data[j] = orig - step;
            let down = eval(&params)?;
            params.tensors[ti].data[j] = orig;
            let numeric = (up - down) / (2.0 * step);
            let analytic = grads.tensors[ti][j];
            diff += (analytic - numeric).powi(2);
            na += analytic * analytic;
            nn += numeric * numeric;
        }
        let (diff, na, nn) = (diff.sqrt(), na.sqrt(), nn.sqrt());
        report.push(GroupCheck {
            name: params.tensors[ti].name.clone(),
            coords: picks.len(),
            rel_error: diff / (na + nn).max(1e-6),
            analytic_norm: na,
        });
    }
    Ok(report)
}
