//! Synthetic 2-D benchmark data.

use std::f64::consts::PI;

use crate::rng::{self, normal_pair};
use crate::tensorgrad::Tensor;

pub const MIXTURE_MODES: usize = 8;
pub const MIXTURE_RADIUS: f64 = 4.0;
pub const MIXTURE_STD: f64 = 0.3;

/// Centers of the eight-Gaussian mixture, evenly spaced on the circle.
pub fn mixture_centers() -> Vec<[f64; 2]> {
    (0..MIXTURE_MODES)
        .map(|k| {
            let a = 2.0 * PI * k as f64 / MIXTURE_MODES as f64;
            [MIXTURE_RADIUS * a.cos(), MIXTURE_RADIUS * a.sin()]
        })
        .collect()
}

/// `n` draws from the equal-weight mixture, shape `[n, 2]`.
pub fn eight_gaussians(n: usize, seed: u64) -> Tensor {
    let centers = mixture_centers();
    let mut r = rng::rng(seed);
    let mut data = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let c = centers[rng::below(&mut r, MIXTURE_MODES)];
        let (a, b) = normal_pair(&mut r);
        data.push(c[0] + MIXTURE_STD * a);
        data.push(c[1] + MIXTURE_STD * b);
    }
    Tensor::from_parts(vec![n, 2], data)
}

/// Rows `idx` of a 2-D tensor.
pub fn gather_rows(x: &Tensor, idx: &[usize]) -> Tensor {
    let d = x.cols();
    let mut data = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        data.extend_from_slice(x.row(i));
    }
    Tensor::from_parts(vec![idx.len(), d], data)
}

/// Minibatches without replacement within an epoch, reshuffled per epoch.
#[derive(Clone, Debug)]
pub struct EpochSampler {
    rng: rand_chacha::ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    len: usize,
}

impl EpochSampler {
    pub fn new(len: usize, seed: u64) -> Self {
        Self {
            rng: rng::rng(seed),
            order: Vec::new(),
            cursor: len,
            len,
        }
    }

    pub fn next_indices(&mut self, batch: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(batch);
        while out.len() < batch {
            if self.cursor >= self.len {
                self.order = rng::permutation(&mut self.rng, self.len);
                self.cursor = 0;
            }
            let take = (batch - out.len()).min(self.len - self.cursor);
            out.extend_from_slice(&self.order[self.cursor..self.cursor + take]);
            self.cursor += take;
        }
        out
    }
}
