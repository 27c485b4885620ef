//! Seeded random streams.
//!
//! Every stochastic routine takes an explicit [`Rng`]; the same seed always
//! reproduces the same run, bit for bit.

use alloc::vec::Vec;
use rand::{Rng as _, SeedableRng};
use rand_distr::{Distribution, StandardNormal};

use crate::Array;

pub type Rng = rand_chacha::ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// An independent stream derived from `seed`; streams with different ids never overlap.
pub fn stream(seed: u64, id: u64) -> Rng {
    let mut r = Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

pub fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

pub fn index(rng: &mut Rng, n: usize) -> usize {
    rng.random_range(0..n)
}

/// An `rows x cols` array of i.i.d. standard normals.
pub fn normal_array(rng: &mut Rng, rows: usize, cols: usize) -> Array {
    let data: Vec<f64> = (0..rows * cols).map(|_| normal(rng)).collect();
    Array::from_vec(rows, cols, data).expect("length matches shape")
}

/// Draws an index from unnormalized non-negative `weights`.
pub fn categorical(rng: &mut Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

pub fn bernoulli(rng: &mut Rng, p: f64) -> bool {
    rng.random::<f64>() < p
}
