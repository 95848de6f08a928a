//! Seeded randomness. Every parameter draws from its own stream keyed by its
//! qualified name, so adding or removing a module never perturbs the
//! initialization of the others.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Deterministic 64-bit seed for `(seed, key)`.
pub fn derive_seed(seed: u64, key: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(key.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

pub fn stream(seed: u64, key: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, key))
}

/// Gaussian tensor with the given standard deviation.
pub fn gaussian<T: Scalar>(rng: &mut impl Rng, shape: impl Into<Vec<usize>>, std: f64) -> Tensor<T> {
    let shape = shape.into();
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("finite std");
    let data = (0..n).map(|_| T::of(dist.sample(rng))).collect();
    Tensor::new(shape, data).expect("length matches shape")
}

/// Inverted-dropout mask: entries are `0` with probability `p`, else `1/(1-p)`.
pub fn dropout_mask<T: Scalar>(rng: &mut impl Rng, shape: impl Into<Vec<usize>>, p: f64) -> Tensor<T> {
    let shape = shape.into();
    let n: usize = shape.iter().product();
    let keep = T::of(1.0 / (1.0 - p));
    let data = (0..n)
        .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
        .collect();
    Tensor::new(shape, data).expect("length matches shape")
}
