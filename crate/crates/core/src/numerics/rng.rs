//! Seeded randomness.
//!
//! Every stream is a ChaCha8 generator keyed by a 64-bit seed
//! (`rand_chacha::ChaCha8Rng::seed_from_u64`), and Gaussian draws use the
//! ziggurat sampler from `rand_distr`. Both are platform-independent, so a
//! seed fully determines corpora, corruption masks and noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::numerics::{Scalar, Tensor};

pub type SeededRng = ChaCha8Rng;

pub fn rng(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// SplitMix64 finaliser; derives independent child seeds from a parent seed
/// and a stream index.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Standard-normal tensor, bit-identical for a given shape and seed.
pub fn gaussian_sample<T: Scalar>(shape: &[usize], seed: u64) -> Result<Tensor<T>> {
    let mut tensor = Tensor::zeros(shape)?;
    fill_gaussian(tensor.data_mut(), &mut rng(seed), 1.0);
    Ok(tensor)
}

pub fn fill_gaussian<T: Scalar>(out: &mut [T], rng: &mut SeededRng, std: f64) {
    for v in out {
        let x: f64 = rng.sample(StandardNormal);
        *v = T::c(x * std);
    }
}

pub fn uniform(rng: &mut SeededRng) -> f64 {
    rng.random::<f64>()
}

/// Fisher-Yates permutation of `0..n`.
pub fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut r = rng(seed);
    for i in (1..n).rev() {
        let j = r.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}
