//! Seeded weight initializers. Each builder threads one RNG through its
//! layers in construction order, so a (family, variant, seed) triple
//! always yields bit-identical parameters.

use ndarray::IxDyn;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::TensorD;

/// He-normal: std = sqrt(2 / fan_in). The usual choice ahead of ReLU-like
/// activations.
pub fn he_normal(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> TensorD {
    let std = (2.0 / fan_in as f64).sqrt();
    normal(rng, shape, std)
}

/// Glorot-normal: std = sqrt(2 / (fan_in + fan_out)).
pub fn glorot_normal(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
) -> TensorD {
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    normal(rng, shape, std)
}

pub fn normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> TensorD {
    let dist = Normal::new(0.0, std).expect("std must be finite and positive");
    TensorD::from_shape_fn(IxDyn(shape), |_| dist.sample(rng) as f32)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], limit: f32) -> TensorD {
    TensorD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-limit..=limit))
}

pub fn zeros(shape: &[usize]) -> TensorD {
    TensorD::zeros(IxDyn(shape))
}

pub fn ones(shape: &[usize]) -> TensorD {
    TensorD::ones(IxDyn(shape))
}
