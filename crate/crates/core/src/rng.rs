//! Seeded randomness.
//!
//! All randomness flows from [`SeededRng`], a ChaCha8 stream cipher
//! generator. Its output is defined by the algorithm alone, so a seed
//! reproduces the same parameters and corpora on every platform.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Real, Tensor};

pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform samples in `[lo, hi)`.
pub fn uniform<T: Real>(rng: &mut SeededRng, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(rng.random_range(lo..hi))).collect();
    Tensor::new(shape, data).expect("shape and data agree")
}

/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn fan_in_uniform<T: Real>(rng: &mut SeededRng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    uniform(rng, shape, -bound, bound)
}
