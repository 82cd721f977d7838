#![allow(dead_code)]

use fuseseg_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values at least `gap` apart and at least `gap / 2` away from zero, in
/// random order, so max and relu kinks stay out of finite-difference reach.
pub fn separated(shape: &[usize], gap: f64, rng: &mut ChaCha8Rng) -> Tensor {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0 + 0.5) * gap).collect();
    v.shuffle(rng);
    Tensor::new(shape.to_vec(), v).unwrap()
}

pub fn binary(shape: &[usize], p: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| if rng.random_bool(p) { 1.0 } else { 0.0 }).collect()).unwrap()
}

/// `n` distinct indices below `len`, or all of them if `len <= n`.
pub fn sample_indices(len: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    rand::seq::index::sample(rng, len, n.min(len)).into_vec()
}

pub const FD_STEP: f64 = 1e-3;
pub const FD_TOL: f64 = 1e-4;

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Central difference of `f` at coordinate `i` of `x`.
pub fn central_diff(x: &mut Tensor, i: usize, f: &mut dyn FnMut(&Tensor) -> f64) -> f64 {
    let orig = x.data()[i];
    x.data_mut()[i] = orig + FD_STEP;
    let up = f(x);
    x.data_mut()[i] = orig - FD_STEP;
    let down = f(x);
    x.data_mut()[i] = orig;
    (up - down) / (2.0 * FD_STEP)
}
