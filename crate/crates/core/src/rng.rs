//! Seeded randomness helpers.
//!
//! All stochastic state in the crate flows through a `ChaCha8` generator
//! seeded from a caller-supplied `u64`, and all normal variates are drawn
//! in `f64` and then converted, so an `f32` run consumes the identical
//! generator stream as an `f64` run with the same seed.

use alloc::vec::Vec;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::matrix::Matrix;
use crate::real::Real;

/// Deterministic generator for the given seed.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// One standard normal variate, drawn in `f64` and narrowed to `T`.
pub fn sample_normal<T: Real>(rng: &mut impl Rng) -> T {
    let v: f64 = rng.sample(StandardNormal);
    T::of(v)
}

/// Vector of independent `N(0, std²)` entries.
pub fn normal_vec<T: Real>(rng: &mut impl Rng, len: usize, std: f64) -> Vec<T> {
    (0..len)
        .map(|_| {
            let v: f64 = rng.sample(StandardNormal);
            T::of(v * std)
        })
        .collect()
}

/// Matrix of independent `N(0, std²)` entries, filled row-major.
pub fn normal_matrix<T: Real>(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Matrix<T> {
    Matrix::from_vec(rows, cols, normal_vec(rng, rows * cols, std))
        .expect("normal_matrix: length is rows*cols by construction")
}

/// `I + noise·G/√n` with `G` standard normal — a near-identity square map.
pub fn identity_plus_noise<T: Real>(rng: &mut impl Rng, n: usize, noise: f64) -> Matrix<T> {
    let std = noise / libm::sqrt(n as f64);
    let mut m = normal_matrix(rng, n, n, std);
    for i in 0..n {
        let v = m.get(i, i);
        m.set(i, i, v + T::one());
    }
    m
}
