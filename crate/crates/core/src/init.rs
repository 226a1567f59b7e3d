//! Seeded parameter initialization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Real, Tensor};

/// The generator used everywhere a seed is accepted.
pub type SeededRng = ChaCha8Rng;

pub fn rng(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform samples on `[-bound, bound)`.
pub fn uniform<T: Real>(shape: impl Into<Vec<usize>>, bound: f64, rng: &mut SeededRng) -> Result<Tensor<T>> {
    Tensor::from_fn(shape, |_| T::lit(if bound > 0.0 { rng.random_range(-bound..bound) } else { 0.0 }))
}

/// Kaiming-uniform for ReLU networks: bound `sqrt(6 / fan_in)`.
pub fn kaiming_uniform<T: Real>(shape: impl Into<Vec<usize>>, fan_in: usize, rng: &mut SeededRng) -> Result<Tensor<T>> {
    uniform(shape, (6.0 / fan_in.max(1) as f64).sqrt(), rng)
}

/// Bias initialization paired with [`kaiming_uniform`]: bound `1 / sqrt(fan_in)`.
pub fn bias_uniform<T: Real>(len: usize, fan_in: usize, rng: &mut SeededRng) -> Result<Tensor<T>> {
    uniform(vec![len], 1.0 / (fan_in.max(1) as f64).sqrt(), rng)
}

/// Standard normal samples (Box-Muller).
pub fn normal<T: Real>(shape: impl Into<Vec<usize>>, std: f64, rng: &mut SeededRng) -> Result<Tensor<T>> {
    Tensor::from_fn(shape, |_| {
        let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.random();
        T::lit(std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos())
    })
}
