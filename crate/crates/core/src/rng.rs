//! Seeded, platform-independent randomness.
//!
//! Everything random in the crate draws from ChaCha8 streams so that a
//! `(seed, stream)` pair reproduces the same values everywhere.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::{Scalar, Tensor};

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Independent stream `stream` of the generator seeded with `seed`.
pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn uniform(rng: &mut Rng, lo: Scalar, hi: Scalar) -> Scalar {
    lo + (hi - lo) * rng.random::<f64>() as Scalar
}

pub fn normal(rng: &mut Rng, std: Scalar) -> Scalar {
    let z: f64 = StandardNormal.sample(rng);
    z as Scalar * std
}

pub fn index(rng: &mut Rng, n: usize) -> usize {
    rng.random_range(0..n)
}

pub fn coin(rng: &mut Rng) -> bool {
    rng.random::<bool>()
}

pub fn normal_tensor(rng: &mut Rng, shape: &[usize], std: Scalar) -> Tensor {
    Tensor::from_fn(shape, |_| normal(rng, std))
}

/// Glorot/Xavier uniform initialisation for a `[fan_in, fan_out]`-like weight.
pub fn xavier_uniform(rng: &mut Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    #[allow(unused_imports)]
    use num_traits::Float;
    let bound = (6.0 / (fan_in + fan_out) as Scalar).sqrt();
    Tensor::from_fn(shape, |_| uniform(rng, -bound, bound))
}
