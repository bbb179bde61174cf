use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensorgrad::{Tape, Tensor, Var};

/// Base angular rate applied to the normalized time `t / T`.
const TIME_SCALE: f64 = 1000.0;
const MAX_PERIOD: f64 = 10_000.0;

fn frequencies(half: usize) -> Vec<f64> {
    (0..half)
        .map(|k| TIME_SCALE * (-(MAX_PERIOD.ln()) * k as f64 / half as f64).exp())
        .collect()
}

/// Sinusoidal embedding of a continuous timestep `t ∈ [0, T]`:
/// `[sin(ω_k t/T)..., cos(ω_k t/T)...]` over geometrically spaced `ω_k`.
pub fn time_embedding(t: f64, t_max: f64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::Usage(format!("embedding dimension must be even, got {dim}")));
    }
    let s = t / t_max;
    let freqs = frequencies(dim / 2);
    let mut out: Vec<f64> = freqs.iter().map(|w| (w * s).sin()).collect();
    out.extend(freqs.iter().map(|w| (w * s).cos()));
    Ok(out)
}

/// [`time_embedding`] for a column of times `[m, 1]`, giving `[m, dim]`.
pub fn embed_on_tape(tape: &mut Tape, t: Var, t_max: usize, dim: usize) -> Result<Var> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::Usage(format!("embedding dimension must be even, got {dim}")));
    }
    let half = dim / 2;
    let freqs = tape.constant(Tensor::matrix(1, half, frequencies(half))?);
    let s = tape.scale(t, 1.0 / t_max as f64);
    let args = tape.matmul(s, freqs)?;
    let sin = tape.sin(args);
    let cos = tape.cos(args);
    tape.concat(&[sin, cos])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub data_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub embed_dim: usize,
    /// Number of base timesteps; times are embedded as `t / t_max`.
    pub t_max: usize,
}

impl NetworkConfig {
    pub fn toy(t_max: usize) -> Self {
        Self {
            data_dim: 2,
            hidden: 128,
            layers: 3,
            embed_dim: 32,
            t_max,
        }
    }

    /// Names and shapes of every weight tensor, in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let (d, h, e) = (self.data_dim, self.hidden, self.embed_dim);
        let mut v = vec![
            ("in.w_x".to_string(), vec![d, h]),
            ("in.w_t".to_string(), vec![e, h]),
            ("in.b".to_string(), vec![h]),
        ];
        for l in 0..self.layers {
            v.push((format!("block{l}.w"), vec![h, h]));
            v.push((format!("block{l}.b"), vec![h]));
        }
        v.push(("out.w".to_string(), vec![h, d]));
        v.push(("out.b".to_string(), vec![d]));
        v
    }
}

/// Residual MLP noise predictor `ε_θ(x, t)`:
///
/// ```text
/// h  = x·W_x + emb(t)·W_t + b
/// h ← h + silu(h·W_l + b_l)       (per block)
/// ε  = silu(h)·W_out + b_out
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreNetwork {
    config: NetworkConfig,
    weights: Vec<Tensor>,
}

impl ScoreNetwork {
    /// Scaled-normal initialization; the output layer starts small.
    pub fn init(config: NetworkConfig, seed: u64) -> Self {
        let mut r = rng::rng(seed);
        let weights = config
            .layout()
            .into_iter()
            .map(|(name, shape)| {
                if shape.len() == 1 {
                    return Tensor::zeros(&shape);
                }
                let fan_in = shape[0] as f64;
                let gain = if name.starts_with("out") { 0.1 } else { 1.0 };
                let std = gain / fan_in.sqrt();
                let n = shape.iter().product();
                let v = rng::normals(&mut r, n).into_iter().map(|z| z * std).collect();
                Tensor::new(shape, v).expect("layout shape")
            })
            .collect();
        Self { config, weights }
    }

    pub fn zeros(config: NetworkConfig) -> Self {
        let weights = config
            .layout()
            .into_iter()
            .map(|(_, shape)| Tensor::zeros(&shape))
            .collect();
        Self { config, weights }
    }

    pub fn from_weights(config: NetworkConfig, weights: Vec<Tensor>) -> Result<Self> {
        let layout = config.layout();
        if layout.len() != weights.len()
            || layout
                .iter()
                .zip(&weights)
                .any(|((_, s), w)| s.as_slice() != w.shape())
        {
            return Err(Error::Format("weights do not match network layout".into()));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Format("non-finite network weight".into()));
        }
        Ok(Self { config, weights })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn weights(&self) -> &[Tensor] {
        &self.weights
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.iter().map(Tensor::numel).sum()
    }

    /// Hash of all weight bits; used to prove the model stays frozen.
    pub fn weight_hash(&self) -> u64 {
        self.weights
            .iter()
            .fold(0u64, |acc, w| acc.rotate_left(7) ^ w.bit_hash())
    }

    /// Registers weights as trainable leaves.
    pub fn leaves(&self, tape: &mut Tape) -> Vec<Var> {
        self.weights.iter().map(|w| tape.leaf(w.clone())).collect()
    }

    /// Registers weights as constants (frozen model).
    pub fn constants(&self, tape: &mut Tape) -> Vec<Var> {
        self.weights.iter().map(|w| tape.constant(w.clone())).collect()
    }

    /// Forward pass on a tape. `x` is `[n, d]`; `t` is `[1, 1]` (shared time)
    /// or `[n, 1]` (per-sample time), on the raw `0..=T` scale.
    pub fn forward(&self, tape: &mut Tape, params: &[Var], x: Var, t: Var) -> Result<Var> {
        let cfg = &self.config;
        let emb = embed_on_tape(tape, t, cfg.t_max, cfg.embed_dim)?;

        let hx = tape.matmul(x, params[0])?;
        let ht = tape.matmul(emb, params[1])?;
        let h = tape.add(hx, ht)?;
        let mut h = tape.add(h, params[2])?;
        for l in 0..cfg.layers {
            let z = tape.matmul(h, params[3 + 2 * l])?;
            let z = tape.add(z, params[4 + 2 * l])?;
            let z = tape.silu(z);
            h = tape.add(h, z)?;
        }
        let k = 3 + 2 * cfg.layers;
        let a = tape.silu(h);
        let o = tape.matmul(a, params[k])?;
        tape.add(o, params[k + 1])
    }

    /// Plain evaluation of `ε_θ(x, t)` for a shared timestep.
    pub fn predict_eps(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        if x.ndim() != 2 || x.cols() != self.config.data_dim {
            return Err(crate::error::shape_err(
                "predict_eps",
                format!("input {:?} for data dimension {}", x.shape(), self.config.data_dim),
            ));
        }
        let mut tape = Tape::new();
        let params = self.constants(&mut tape);
        let xv = tape.constant(x.clone());
        let tv = tape.constant(Tensor::matrix(1, 1, vec![t])?);
        let out = self.forward(&mut tape, &params, xv, tv)?;
        Ok(tape.value(out).clone())
    }

    /// A checkpoint recipe evaluating the frozen network on `(x, t)`.
    pub fn recipe(self: &Arc<Self>) -> crate::tensorgrad::Recipe {
        let net = Arc::clone(self);
        std::rc::Rc::new(move |tape: &mut Tape, inputs: &[Var]| {
            let params = net.constants(tape);
            net.forward(tape, &params, inputs[0], inputs[1])
        })
    }
}
