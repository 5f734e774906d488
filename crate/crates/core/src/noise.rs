//! Seeded smooth value-noise fields.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::grid::Grid;

/// Derives an independent seed from `seed` and a stream id (splitmix64 finalizer).
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Smooth field in [-1, 1] built from a random lattice spaced `cell`
/// pixels apart, interpolated with a quintic fade. Two octaves.
pub fn value_noise(height: usize, width: usize, cell: f64, seed: u64) -> Grid<f64> {
    let cell = cell.max(1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coarse = Lattice::random(height, width, cell, &mut rng);
    let fine = Lattice::random(height, width, cell * 0.5, &mut rng);
    Grid::from_fn(height, width, |v, u| {
        let (x, y) = (u as f64, v as f64);
        (0.7 * coarse.sample(x, y) + 0.3 * fine.sample(x, y)).clamp(-1.0, 1.0)
    })
}

struct Lattice {
    cols: usize,
    cell: f64,
    values: Vec<f64>,
}

impl Lattice {
    fn random(height: usize, width: usize, cell: f64, rng: &mut ChaCha8Rng) -> Self {
        let cell = cell.max(1.0);
        let cols = (width as f64 / cell).ceil() as usize + 2;
        let rows = (height as f64 / cell).ceil() as usize + 2;
        let values = (0..rows * cols).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        Lattice { cols, cell, values }
    }

    fn sample(&self, x: f64, y: f64) -> f64 {
        let gx = x / self.cell;
        let gy = y / self.cell;
        let (i, j) = (gx.floor() as usize, gy.floor() as usize);
        let (tx, ty) = (fade(gx - i as f64), fade(gy - j as f64));
        let at = |r: usize, c: usize| self.values[r * self.cols + c];
        let top = at(j, i) * (1.0 - tx) + at(j, i + 1) * tx;
        let bottom = at(j + 1, i) * (1.0 - tx) + at(j + 1, i + 1) * tx;
        top * (1.0 - ty) + bottom * ty
    }
}

#[inline]
fn fade(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_bounded_and_signed() {
        let a = value_noise(40, 40, 8.0, 7);
        let b = value_noise(40, 40, 8.0, 7);
        assert_eq!(a, b);
        assert!(a.data.iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(a.data.iter().any(|v| *v > 0.0) && a.data.iter().any(|v| *v < 0.0));
        assert_ne!(a, value_noise(40, 40, 8.0, 8));
    }

    #[test]
    fn neighbouring_pixels_are_close() {
        let f = value_noise(32, 32, 8.0, 1);
        for v in 0..32 {
            for u in 1..32 {
                assert!((f.at(v, u) - f.at(v, u - 1)).abs() < 0.5);
            }
        }
    }
}
