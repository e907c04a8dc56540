//! Seeded weight initialisation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// The one RNG used everywhere; portable and stable across platforms.
pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform in `[-1/√fan_in, 1/√fan_in]`.
pub fn uniform_fan_in<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    uniform(shape, bound, rng)
}

pub fn uniform<T: Scalar>(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor<T> {
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| T::of(rng.gen_range(-bound..=bound))).collect();
    Tensor::from_vec(shape, data).expect("positive extents")
}
