//! K-step samplers and stride generators.
//!
//! All samplers draw the terminal state and the per-step noise from a
//! [`NoiseStream`], indexed by lattice step and sample, so different samplers
//! can be compared on identical noise.

pub mod stride;

use std::sync::Arc;

pub use stride::{stride_timesteps, StrideKind};

use crate::diffusion::{NoiseSchedule, ScoreNetwork};
use crate::error::{domain_err, Error, Result};
use crate::ggdm::{ddpm_posterior, predict_x0, predict_x0_plain, GgdmParams, Lattice, SamplerView};
use crate::rng::NoiseStream;
use crate::tensorgrad::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct SampleBatch {
    /// Final samples `[n, d]`.
    pub samples: Tensor,
    /// `x_K, ..., x_1, x_0` when requested.
    pub trajectory: Option<Vec<Tensor>>,
    pub noise: NoiseStream,
    /// Index of the first sample in the noise stream.
    pub first: usize,
}

/// Which samples to draw and whether to keep intermediate states.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Draw {
    pub noise: NoiseStream,
    pub first: usize,
    pub n: usize,
    pub keep_trajectory: bool,
}

impl Draw {
    pub fn new(seed: u64, n: usize) -> Self {
        Self {
            noise: NoiseStream::new(seed),
            first: 0,
            n,
            keep_trajectory: false,
        }
    }

    pub fn with_trajectory(mut self) -> Self {
        self.keep_trajectory = true;
        self
    }
}

fn check_stride(schedule: &NoiseSchedule, stride: &[usize]) -> Result<()> {
    let ok = !stride.is_empty()
        && stride.windows(2).all(|w| w[0] < w[1])
        && stride[0] >= 1
        && *stride.last().unwrap() <= schedule.len();
    if ok {
        Ok(())
    } else {
        Err(Error::Usage(format!(
            "stride {stride:?} is not strictly increasing within 1..={}",
            schedule.len()
        )))
    }
}

fn axpby(a: f64, x: &Tensor, b: f64, y: &Tensor) -> Result<Tensor> {
    x.zip_map(y, |xi, yi| a * xi + b * yi)
}

struct Recorder {
    keep: bool,
    states: Vec<Tensor>,
}

impl Recorder {
    fn push(&mut self, x: &Tensor) {
        if self.keep {
            self.states.push(x.clone());
        }
    }

    fn finish(self, draw: Draw, samples: Tensor) -> SampleBatch {
        SampleBatch {
            samples,
            trajectory: self.keep.then_some(self.states),
            noise: draw.noise,
            first: draw.first,
        }
    }
}

/// Ancestral DDPM sampling on the subchain `stride`: each step draws from the
/// posterior `q(x_s | x_u, x̂_0)`; the last step returns `x̂_0`.
pub fn sample_ddpm_stride(
    model: &ScoreNetwork,
    schedule: &NoiseSchedule,
    stride: &[usize],
    draw: Draw,
) -> Result<SampleBatch> {
    check_stride(schedule, stride)?;
    let d = model.config().data_dim;
    let k = stride.len();
    let mut x = draw.noise.initial(draw.first, draw.n, d);
    let mut rec = Recorder {
        keep: draw.keep_trajectory,
        states: Vec::new(),
    };
    for t in (1..=k).rev() {
        rec.push(&x);
        let tu = stride[t - 1];
        let au = schedule.alpha_bar(tu);
        let eps = model.predict_eps(&x, tu as f64)?;
        let x0 = predict_x0_plain(&x, &eps, au.sqrt(), 1.0 - au, t)?;
        if t == 1 {
            rec.push(&x0);
            return Ok(rec.finish(draw, x0));
        }
        let (mu_u, mu_0, var) = ddpm_posterior(schedule.alpha_bar(stride[t - 2]), au);
        let z = draw.noise.step(t - 1, draw.first, draw.n, d);
        let mean = axpby(mu_u, &x, mu_0, &x0)?;
        x = axpby(1.0, &mean, var.sqrt(), &z)?;
    }
    unreachable!("stride is non-empty")
}

/// Posterior standard deviations for DDIM.
#[derive(Clone, Debug, PartialEq)]
pub enum DdimNoise {
    /// `σ = η ·` the DDPM posterior standard deviation of each step.
    Eta(f64),
    /// Explicit `σ_t` for the states `t = 1..K-1`.
    Sigmas(Vec<f64>),
}

impl DdimNoise {
    /// Resolved `σ_t`, `t = 1..K-1`.
    pub fn sigmas(&self, schedule: &NoiseSchedule, stride: &[usize]) -> Result<Vec<f64>> {
        let k = stride.len();
        match self {
            DdimNoise::Eta(eta) => {
                if !(eta.is_finite() && *eta >= 0.0) {
                    return Err(domain_err("sample_ddim", format!("eta must be >= 0, got {eta}")));
                }
                Ok((1..k)
                    .map(|t| {
                        let (_, _, var) = ddpm_posterior(
                            schedule.alpha_bar(stride[t - 1]),
                            schedule.alpha_bar(stride[t]),
                        );
                        eta * var.sqrt()
                    })
                    .collect())
            }
            DdimNoise::Sigmas(s) => {
                if s.len() + 1 != k {
                    return Err(Error::Usage(format!(
                        "DDIM with K={k} needs {} sigmas, got {}",
                        k - 1,
                        s.len()
                    )));
                }
                Ok(s.clone())
            }
        }
    }
}

/// DDIM: `x_s = √ᾱ_s x̂_0 + √(1-ᾱ_s-σ²) ε̂ + σ z`; the last step returns `x̂_0`.
pub fn sample_ddim(
    model: &ScoreNetwork,
    schedule: &NoiseSchedule,
    stride: &[usize],
    noise_spec: &DdimNoise,
    draw: Draw,
) -> Result<SampleBatch> {
    check_stride(schedule, stride)?;
    let sigmas = noise_spec.sigmas(schedule, stride)?;
    let d = model.config().data_dim;
    let k = stride.len();
    for t in 1..k {
        let room = 1.0 - schedule.alpha_bar(stride[t - 1]);
        if sigmas[t - 1] < 0.0 || sigmas[t - 1].powi(2) > room * (1.0 + 1e-12) {
            return Err(domain_err(
                "sample_ddim",
                format!(
                    "sigma_{t} = {} outside [0, sqrt(1 - alpha_bar) = {}]",
                    sigmas[t - 1],
                    room.sqrt()
                ),
            ));
        }
    }
    let mut x = draw.noise.initial(draw.first, draw.n, d);
    let mut rec = Recorder {
        keep: draw.keep_trajectory,
        states: Vec::new(),
    };
    for t in (1..=k).rev() {
        rec.push(&x);
        let tu = stride[t - 1];
        let au = schedule.alpha_bar(tu);
        let eps = model.predict_eps(&x, tu as f64)?;
        let x0 = predict_x0_plain(&x, &eps, au.sqrt(), 1.0 - au, t)?;
        if t == 1 {
            rec.push(&x0);
            return Ok(rec.finish(draw, x0));
        }
        let a_s = schedule.alpha_bar(stride[t - 2]);
        let sigma = sigmas[t - 2];
        let dir = (1.0 - a_s - sigma * sigma).max(0.0).sqrt();
        let mut next = axpby(a_s.sqrt(), &x0, dir, &eps)?;
        if sigma > 0.0 {
            let z = draw.noise.step(t - 1, draw.first, draw.n, d);
            next = axpby(1.0, &next, sigma, &z)?;
        }
        x = next;
    }
    unreachable!("stride is non-empty")
}

/// States of a GGDM chain recorded on a tape.
#[derive(Clone, Debug)]
pub struct TapeChain {
    /// Final samples `x̂_0` from `x_1`.
    pub samples: Var,
    /// `x_K, ..., x_1, x_0`.
    pub states: Vec<Var>,
}

/// Runs the full-history GGDM sampler on `tape`.
///
/// Step `t` (from `K-1` down to `1`) predicts `x̂_0` from `x_{t+1}` and forms
/// `μ_{t,0} x̂_0 + Σ_{u>t} μ_{t,u} x_u + σ_t z_t`. Every score evaluation is
/// one checkpoint, so with rematerialization on no network activations stay
/// on the tape.
pub fn sample_ggdm_on_tape(
    tape: &mut Tape,
    model: &Arc<ScoreNetwork>,
    view: &SamplerView,
    noise: &NoiseStream,
    first: usize,
    n: usize,
) -> Result<TapeChain> {
    let k = view.lattice.k;
    if view.times.len() != k || view.marginals.k != k {
        return Err(Error::Structural(format!(
            "sampler view has {} times and a K={} marginal table for K={k}",
            view.times.len(),
            view.marginals.k
        )));
    }
    let d = model.config().data_dim;
    let recipe = model.recipe();
    // history[u - 1] holds x_u.
    let mut history: Vec<Option<Var>> = vec![None; k];
    history[k - 1] = Some(tape.constant(noise.initial(first, n, d)));
    let mut states = vec![history[k - 1].unwrap()];
    for u in (1..=k).rev() {
        let x = history[u - 1].expect("state produced");
        let t_in = tape.reshape(view.times[u - 1], &[1, 1])?;
        let eps = tape.checkpoint(recipe.clone(), &[x, t_in])?;
        let marginal = (view.marginals.marginal_a(u), view.marginals.marginal_v(u));
        let pred = view.pred.as_ref().map(|(a, b)| (a[u - 1], b[u - 1]));
        let x0 = predict_x0(tape, x, eps, marginal, pred, u)?;
        if u == 1 {
            states.push(x0);
            return Ok(TapeChain { samples: x0, states });
        }
        let t = u - 1;
        let mut mean = tape.mul(view.lattice.mu0[t - 1], x0)?;
        for v in t + 1..=k {
            if let Some(&m) = view.lattice.mu(t, v) {
                let xv = history[v - 1]
                    .ok_or_else(|| Error::Structural(format!("state x_{v} missing at step {t}")))?;
                let term = tape.mul(m, xv)?;
                mean = tape.add(mean, term)?;
            }
        }
        let z = noise.step(t, first, n, d);
        let xt = tape.gaussian_reparam(mean, view.lattice.sigma[t - 1], &z)?;
        history[t - 1] = Some(xt);
        states.push(xt);
    }
    unreachable!("K >= 1")
}

/// Off-tape GGDM sampling from fixed parameters.
pub fn sample_ggdm(
    model: &Arc<ScoreNetwork>,
    params: &GgdmParams,
    schedule: &NoiseSchedule,
    draw: Draw,
) -> Result<SampleBatch> {
    params.check_schedule(schedule)?;
    let mut tape = Tape::new();
    let raw = params.register(&mut tape, false);
    let view = params.view(&mut tape, &raw, schedule)?;
    let chain = sample_ggdm_on_tape(&mut tape, model, &view, &draw.noise, draw.first, draw.n)?;
    Ok(SampleBatch {
        samples: tape.value(chain.samples).clone(),
        trajectory: draw
            .keep_trajectory
            .then(|| chain.states.iter().map(|&v| tape.value(v).clone()).collect()),
        noise: draw.noise,
        first: draw.first,
    })
}

/// Off-tape sampling from a fixed coefficient lattice at base times `times`.
pub fn sample_lattice(
    model: &Arc<ScoreNetwork>,
    times: &[f64],
    lattice: &Lattice<f64>,
    draw: Draw,
) -> Result<SampleBatch> {
    let mut tape = Tape::new();
    let view = SamplerView::from_lattice(&mut tape, times, lattice)?;
    let chain = sample_ggdm_on_tape(&mut tape, model, &view, &draw.noise, draw.first, draw.n)?;
    Ok(SampleBatch {
        samples: tape.value(chain.samples).clone(),
        trajectory: draw
            .keep_trajectory
            .then(|| chain.states.iter().map(|&v| tape.value(v).clone()).collect()),
        noise: draw.noise,
        first: draw.first,
    })
}
