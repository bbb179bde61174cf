//! Generalized Gaussian diffusion samplers: lattice coefficients, the
//! marginal recursion, the search-family parametrizations and their
//! initialization from a strided DDPM.

pub mod lattice;
pub mod params;

pub use lattice::{theorem1_marginals, theorem1_marginals_plain, Lattice, MarginalRow, MarginalTable};
pub use params::{
    init_from_ddpm, Family, GgdmParams, OffDiagonal, RawVars, SamplerSpec, SamplerValues, SamplerView,
};

use crate::error::{domain_err, Error, Result};
use crate::tensorgrad::{Tape, Tensor, Var};

/// Coefficients of the DDPM posterior `q(x_s | x_u, x_0)` for `s < u`:
/// `(μ_{s,u}, μ_{s,0}, σ_s²)`.
pub fn ddpm_posterior(alpha_bar_s: f64, alpha_bar_u: f64) -> (f64, f64, f64) {
    let (s, u) = (alpha_bar_s, alpha_bar_u);
    let r = u / s;
    let mu_u = r.sqrt() * (1.0 - s) / (1.0 - u);
    let mu_0 = s.sqrt() * (1.0 - r) / (1.0 - u);
    let var = (1.0 - s) / (1.0 - u) * (1.0 - r);
    (mu_u, mu_0, var)
}

/// [`ddpm_posterior`] on the tape, returning a standard deviation.
pub(crate) fn ddpm_posterior_on_tape(tape: &mut Tape, a_s: Var, a_u: Var) -> Result<(Var, Var, Var)> {
    let r = tape.div(a_u, a_s)?;
    let one_minus_s = tape.map(a_s, |x| (1.0 - x, -1.0));
    let one_minus_u = tape.map(a_u, |x| (1.0 - x, -1.0));
    let one_minus_r = tape.map(r, |x| (1.0 - x, -1.0));
    let sqrt_r = tape.sqrt(r)?;
    let num = tape.mul(sqrt_r, one_minus_s)?;
    let mu_u = tape.div(num, one_minus_u)?;
    let sqrt_s = tape.sqrt(a_s)?;
    let num = tape.mul(sqrt_s, one_minus_r)?;
    let mu_0 = tape.div(num, one_minus_u)?;
    let ratio = tape.div(one_minus_s, one_minus_u)?;
    let var = tape.mul(ratio, one_minus_r)?;
    let sigma = tape.sqrt(var)?;
    Ok((mu_u, mu_0, sigma))
}

/// The sparse lattice of a DDIM sampler on `K` kept times.
///
/// `alpha_bars[t-1]` is `ᾱ` at lattice index `t`; `sigma[t-1]` is the standard
/// deviation used when producing `x_t`, for `t = 1..K-1`.
pub(crate) fn ddim_lattice_on_tape(tape: &mut Tape, alpha_bars: &[Var], sigma: &[Var]) -> Result<Lattice<Var>> {
    let k = alpha_bars.len();
    if k == 0 || sigma.len() + 1 != k {
        return Err(Error::Structural(format!(
            "DDIM embedding needs K-1 = {} sigmas, got {}",
            k.saturating_sub(1),
            sigma.len()
        )));
    }
    let mut mu0 = Vec::with_capacity(k);
    let mut mu_hist = Vec::with_capacity(k);
    let mut sig = Vec::with_capacity(k);
    for t in 1..k {
        let (a_t, a_u) = (alpha_bars[t - 1], alpha_bars[t]);
        let var = tape.square(sigma[t - 1]);
        let one_minus_t = tape.map(a_t, |x| (1.0 - x, -1.0));
        let rad = tape.sub(one_minus_t, var)?;
        let r = tape.value(rad).item();
        if r < -1e-12 * tape.value(one_minus_t).item() {
            return Err(domain_err(
                "ddim_embedding",
                format!(
                    "sigma_{t} = {} exceeds sqrt(1 - alpha_bar_{t}) = {}",
                    tape.value(sigma[t - 1]).item(),
                    tape.value(one_minus_t).item().sqrt()
                ),
            ));
        }
        // Rounding at the admissible boundary must not produce a NaN.
        let rad = tape.map(rad, |x| if x > 0.0 { (x, 1.0) } else { (0.0, 0.0) });
        let num = tape.sqrt(rad)?;
        let one_minus_u = tape.map(a_u, |x| (1.0 - x, -1.0));
        let den = tape.sqrt(one_minus_u)?;
        let mu_next = tape.div(num, den)?;
        let sqrt_t = tape.sqrt(a_t)?;
        let sqrt_u = tape.sqrt(a_u)?;
        let carried = tape.mul(mu_next, sqrt_u)?;
        let m0 = tape.sub(sqrt_t, carried)?;
        let mut hist = vec![None; k - t];
        hist[0] = Some(mu_next);
        mu0.push(m0);
        mu_hist.push(hist);
        sig.push(sigma[t - 1]);
    }
    let (m, s) = terminal_on_tape(tape, alpha_bars[k - 1])?;
    mu0.push(m);
    mu_hist.push(Vec::new());
    sig.push(s);
    Ok(Lattice {
        k,
        mu0,
        mu_hist,
        sigma: sig,
    })
}

/// `(√ᾱ_K, √(1-ᾱ_K))`, the factor `q(x_K | x_0)`.
pub(crate) fn terminal_on_tape(tape: &mut Tape, alpha_bar_k: Var) -> Result<(Var, Var)> {
    let m = tape.sqrt(alpha_bar_k)?;
    let one_minus = tape.map(alpha_bar_k, |x| (1.0 - x, -1.0));
    let s = tape.sqrt(one_minus)?;
    Ok((m, s))
}

/// DDIM embedded into the lattice: `μ_{t,t+1} = √(1-ᾱ_t-σ_t²)/√(1-ᾱ_{t+1})`,
/// `μ_{t,0} = √ᾱ_t - μ_{t,t+1}√ᾱ_{t+1}`, all other history coefficients zero.
pub fn ddim_embedding(alpha_bars: &[f64], sigma: &[f64]) -> Result<Lattice<f64>> {
    let mut tape = Tape::new();
    let a: Vec<Var> = alpha_bars
        .iter()
        .map(|&x| tape.constant(Tensor::scalar(x)))
        .collect();
    let s: Vec<Var> = sigma.iter().map(|&x| tape.constant(Tensor::scalar(x))).collect();
    let lattice = ddim_lattice_on_tape(&mut tape, &a, &s)?;
    Ok(lattice.map(|&v| tape.value(v).item()))
}

/// Implied `ᾱ'` of a VARS sampler: `1 - cumsum(softmax([raw; 1]))`, with the
/// final entry exactly zero.
pub fn vars_to_schedule(raw: &[f64]) -> Vec<f64> {
    let mut tape = Tape::new();
    let r = tape.constant(Tensor::vector(raw.to_vec()));
    let v = vars_variances_on_tape(&mut tape, r).expect("vector input");
    tape.value(v).data().iter().map(|x| 1.0 - x).collect()
}

pub(crate) fn vars_variances_on_tape(tape: &mut Tape, raw: Var) -> Result<Var> {
    simplex_on_tape(tape, raw)
}

/// `cumsum(softmax([raw; 1]))`.
pub(crate) fn simplex_on_tape(tape: &mut Tape, raw: Var) -> Result<Var> {
    let one = tape.constant(Tensor::vector(vec![1.0]));
    let full = tape.concat(&[raw, one])?;
    let p = tape.softmax(full);
    Ok(tape.simplex_cumsum(p))
}

/// Raw values whose `cumsum(softmax([raw; 1]))` is `targets` (increasing, last = 1).
pub(crate) fn simplex_inverse(targets: &[f64]) -> Vec<f64> {
    let k = targets.len();
    let inc: Vec<f64> = (0..k)
        .map(|i| targets[i] - if i == 0 { 0.0 } else { targets[i - 1] })
        .collect();
    (0..k - 1).map(|i| 1.0 + (inc[i] / inc[k - 1]).ln()).collect()
}

/// Prediction of `x_0` from `x_t` and `ε̂`.
///
/// Without coefficients: `(x_t - √v ε̂) / a`, where `(a, v)` are the marginal
/// mean coefficient and variance of `x_t`. With `pred = (a_t, b_t)`:
/// `a_t x_t - b_t ε̂`.
pub fn predict_x0(
    tape: &mut Tape,
    x: Var,
    eps: Var,
    marginal: (Var, Var),
    pred: Option<(Var, Var)>,
    step: usize,
) -> Result<Var> {
    if let Some((a, b)) = pred {
        let ax = tape.mul(a, x)?;
        let be = tape.mul(b, eps)?;
        return tape.sub(ax, be);
    }
    let (a, v) = marginal;
    let coefficient = tape.value(a).item();
    if coefficient.abs() < 1e-8 || !coefficient.is_finite() {
        return Err(Error::Singularity { step, coefficient });
    }
    let sd = tape.sqrt(v)?;
    let noise = tape.mul(sd, eps)?;
    let num = tape.sub(x, noise)?;
    tape.div(num, a)
}

/// [`predict_x0`] on plain tensors without coefficients.
pub fn predict_x0_plain(x: &Tensor, eps: &Tensor, a: f64, v: f64, step: usize) -> Result<Tensor> {
    if a.abs() < 1e-8 || !a.is_finite() {
        return Err(Error::Singularity { step, coefficient: a });
    }
    let sd = v.sqrt();
    x.zip_map(eps, |xi, ei| (xi - sd * ei) / a)
}
