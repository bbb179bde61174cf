//! Seeded random streams.
//!
//! Normals come from Box–Muller over ChaCha8 output so every draw consumes a
//! fixed number of words; that makes streams addressable by position.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensorgrad::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform in (0, 1], 53 bits.
#[inline]
fn open_uniform(rng: &mut impl RngCore) -> f64 {
    ((rng.next_u64() >> 11) as f64 + 1.0) * (1.0 / (1u64 << 53) as f64)
}

/// A pair of independent standard normals from exactly two `u64` draws.
#[inline]
pub fn normal_pair(rng: &mut impl RngCore) -> (f64, f64) {
    let u1 = open_uniform(rng);
    let u2 = open_uniform(rng);
    let r = (-2.0 * u1.ln()).sqrt();
    let theta = 2.0 * std::f64::consts::PI * u2;
    (r * theta.cos(), r * theta.sin())
}

pub fn normals(rng: &mut impl RngCore, count: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(count + 1);
    while out.len() < count {
        let (a, b) = normal_pair(rng);
        out.push(a);
        out.push(b);
    }
    out.truncate(count);
    out
}

pub fn uniform(rng: &mut impl RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform integer in `0..n`.
pub fn below(rng: &mut impl RngCore, n: usize) -> usize {
    (uniform(rng) * n as f64) as usize % n.max(1)
}

/// Fisher–Yates permutation of `0..n`.
pub fn permutation(rng: &mut impl RngCore, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = below(rng, i + 1);
        p.swap(i, j);
    }
    p
}

/// Counter-based Gaussian noise: the draw for `(step, sample)` is independent
/// of batch size and of which other samples were requested.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NoiseStream {
    pub initial_seed: u64,
    pub step_seed: u64,
}

impl NoiseStream {
    pub fn new(seed: u64) -> Self {
        Self {
            initial_seed: seed,
            step_seed: seed ^ 0x9e37_79b9_7f4a_7c15,
        }
    }

    /// Separate seeds for the terminal draw `x_K` and the per-step noise.
    pub fn split(initial_seed: u64, step_seed: u64) -> Self {
        Self {
            initial_seed,
            step_seed,
        }
    }

    /// Terminal noise for samples `first..first + n`, shape `[n, dim]`.
    pub fn initial(&self, first: usize, n: usize, dim: usize) -> Tensor {
        block(self.initial_seed, 0, first, n, dim)
    }

    /// Noise injected when producing lattice state `step`, shape `[n, dim]`.
    pub fn step(&self, step: usize, first: usize, n: usize, dim: usize) -> Tensor {
        block(self.step_seed, step as u64 + 1, first, n, dim)
    }
}

fn block(seed: u64, stream: u64, first: usize, n: usize, dim: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let pairs = dim.div_ceil(2);
    let mut data = Vec::with_capacity(n * dim);
    // Each pair consumes two u64 = four u32 words.
    rng.set_word_pos((first * pairs * 4) as u128);
    for _ in 0..n {
        let mut row = Vec::with_capacity(pairs * 2);
        for _ in 0..pairs {
            let (a, b) = normal_pair(&mut rng);
            row.push(a);
            row.push(b);
        }
        data.extend_from_slice(&row[..dim]);
    }
    Tensor::from_parts(vec![n, dim], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noise_is_addressable_by_sample() {
        let s = NoiseStream::new(7);
        let all = s.step(3, 0, 10, 3);
        let tail = s.step(3, 4, 6, 3);
        assert_eq!(&all.data()[12..], tail.data());
        assert_ne!(s.step(2, 0, 1, 3), s.step(3, 0, 1, 3));
        assert_ne!(s.initial(0, 1, 3), s.step(0, 0, 1, 3));
    }

    #[test]
    fn normals_have_unit_moments() {
        let mut r = rng(1);
        let v = normals(&mut r, 200_000);
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
        assert!(mean.abs() < 0.01, "{mean}");
        assert!((var - 1.0).abs() < 0.01, "{var}");
    }
}
