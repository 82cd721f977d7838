//! Deterministic He initialization.

use alloc::vec::Vec;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Tensor;

/// Zero-mean normal samples with variance `2 / fan_in`.
pub fn he_init_with(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    assert!(fan_in > 0, "fan_in must be positive");
    let std = libm::sqrt(2.0 / fan_in as f64);
    let dist = Normal::new(0.0, std).expect("finite positive std");
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("length matches shape")
}

pub fn he_init(shape: &[usize], fan_in: usize, seed: u64) -> Tensor {
    he_init_with(shape, fan_in, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn bias_init(len: usize) -> Tensor {
    Tensor::zeros([len])
}
