//! Seeded parameter initializers.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::tensor::Tensor;

pub fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor {
    if bound == 0.0 {
        return Tensor::zeros(shape);
    }
    let dist = Uniform::new_inclusive(-bound, bound);
    Tensor::from_fn(shape, |_| dist.sample(rng))
}

pub fn normal(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let dist = Normal::new(0.0, std).expect("std is finite and non-negative");
    Tensor::from_fn(shape, |_| dist.sample(rng))
}

/// Glorot-uniform for a `[fan_in, fan_out]` matrix.
pub fn xavier(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform(&[fan_in, fan_out], bound, rng)
}
