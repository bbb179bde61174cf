use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensorgrad::{sigmoid, Tape, Tensor, Var};

/// How a [`NoiseSchedule`] was generated.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScheduleKind {
    LinearBeta { beta_min: f64, beta_max: f64 },
    CosineLogSnr { logsnr_max: f64, logsnr_min: f64 },
}

impl ScheduleKind {
    pub fn label(&self) -> &'static str {
        match self {
            ScheduleKind::LinearBeta { .. } => "linear_beta",
            ScheduleKind::CosineLogSnr { .. } => "cosine_logsnr",
        }
    }
}

/// Discrete forward process over `t = 1..=T`, with `ᾱ_0 = 1` by convention.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
    log_snr: Vec<f64>,
    /// Fritsch–Carlson slopes of log-SNR at the integer knots.
    slopes: Vec<f64>,
}

impl NoiseSchedule {
    /// β linearly spaced from `beta_min` (t = 1) to `beta_max` (t = T).
    pub fn linear(t_max: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if t_max == 0 || !(0.0 < beta_min && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::Usage(format!(
                "linear schedule needs T >= 1 and 0 < beta_min <= beta_max < 1, got T={t_max}, [{beta_min}, {beta_max}]"
            )));
        }
        let betas: Vec<f64> = (0..t_max)
            .map(|i| {
                if t_max == 1 {
                    beta_min
                } else {
                    beta_min + (beta_max - beta_min) * i as f64 / (t_max - 1) as f64
                }
            })
            .collect();
        let mut acc = 1.0;
        let alpha_bars = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(Self::assemble(
            ScheduleKind::LinearBeta { beta_min, beta_max },
            betas,
            alpha_bars,
        ))
    }

    /// log-SNR decreasing from `logsnr_max` at t = 1 to `logsnr_min` at t = T
    /// along `-2 ln tan(θ)` with θ linear in t.
    pub fn cosine_logsnr(t_max: usize, logsnr_max: f64, logsnr_min: f64) -> Result<Self> {
        if t_max == 0 || logsnr_max <= logsnr_min {
            return Err(Error::Usage(format!(
                "cosine log-SNR schedule needs T >= 1 and logsnr_max > logsnr_min, got T={t_max}, [{logsnr_max}, {logsnr_min}]"
            )));
        }
        let theta_lo = (-0.5 * logsnr_max).exp().atan();
        let theta_hi = (-0.5 * logsnr_min).exp().atan();
        let log_snr: Vec<f64> = (0..t_max)
            .map(|i| {
                if i == 0 {
                    return logsnr_max;
                }
                if i == t_max - 1 {
                    return logsnr_min;
                }
                let u = i as f64 / (t_max - 1) as f64;
                -2.0 * (theta_lo + u * (theta_hi - theta_lo)).tan().ln()
            })
            .collect();
        let alpha_bars: Vec<f64> = log_snr.iter().map(|&l| sigmoid(l)).collect();
        let mut prev = 1.0;
        let betas = alpha_bars
            .iter()
            .map(|&a| {
                let b = 1.0 - a / prev;
                prev = a;
                b
            })
            .collect();
        Ok(Self::assemble_with_log_snr(
            ScheduleKind::CosineLogSnr {
                logsnr_max,
                logsnr_min,
            },
            betas,
            alpha_bars,
            log_snr,
        ))
    }

    fn assemble(kind: ScheduleKind, betas: Vec<f64>, alpha_bars: Vec<f64>) -> Self {
        let log_snr: Vec<f64> = alpha_bars.iter().map(|&a| a.ln() - (-a).ln_1p()).collect();
        Self::assemble_with_log_snr(kind, betas, alpha_bars, log_snr)
    }

    // Near alpha_bar = 1 the log-SNR cannot be recovered from alpha_bar to full
    // precision, so generators that know it exactly pass it in.
    fn assemble_with_log_snr(
        kind: ScheduleKind,
        betas: Vec<f64>,
        alpha_bars: Vec<f64>,
        log_snr: Vec<f64>,
    ) -> Self {
        let slopes = pchip_slopes(&log_snr);
        Self {
            kind,
            betas,
            alpha_bars,
            log_snr,
            slopes,
        }
    }

    /// Rebuilds a schedule from stored arrays (checkpoint loading).
    pub fn from_arrays(kind: ScheduleKind, betas: Vec<f64>, alpha_bars: Vec<f64>) -> Result<Self> {
        if betas.len() != alpha_bars.len() || betas.is_empty() {
            return Err(Error::Format("schedule arrays have mismatched lengths".into()));
        }
        Ok(Self::assemble(kind, betas, alpha_bars))
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Number of base timesteps `T`.
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// `ᾱ_t`; `t = 0` yields 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn log_snr(&self, t: usize) -> f64 {
        self.log_snr[t - 1]
    }

    pub fn snr(&self, t: usize) -> f64 {
        let a = self.alpha_bar(t);
        a / (1.0 - a)
    }

    /// Monotone cubic interpolation of log-SNR at a continuous time, with
    /// linear extrapolation outside `[1, T]`. Returns value and derivative.
    pub fn log_snr_continuous(&self, t: f64) -> (f64, f64) {
        let n = self.log_snr.len();
        if n == 1 {
            return (self.log_snr[0], 0.0);
        }
        if t <= 1.0 {
            let d = self.slopes[0];
            return (self.log_snr[0] + d * (t - 1.0), d);
        }
        if t >= n as f64 {
            let d = self.slopes[n - 1];
            return (self.log_snr[n - 1] + d * (t - n as f64), d);
        }
        let k = ((t - 1.0).floor() as usize).min(n - 2);
        let s = t - 1.0 - k as f64;
        let (y0, y1) = (self.log_snr[k], self.log_snr[k + 1]);
        let (d0, d1) = (self.slopes[k], self.slopes[k + 1]);
        let (s2, s3) = (s * s, s * s * s);
        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = s3 - 2.0 * s2 + s;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = s3 - s2;
        let value = h00 * y0 + h10 * d0 + h01 * y1 + h11 * d1;
        let dh00 = 6.0 * s2 - 6.0 * s;
        let dh10 = 3.0 * s2 - 4.0 * s + 1.0;
        let dh01 = -6.0 * s2 + 6.0 * s;
        let dh11 = 3.0 * s2 - 2.0 * s;
        let deriv = dh00 * y0 + dh10 * d0 + dh01 * y1 + dh11 * d1;
        (value, deriv)
    }

    pub fn alpha_bar_continuous(&self, t: f64) -> f64 {
        sigmoid(self.log_snr_continuous(t).0)
    }

    /// `ᾱ(τ)` for a recorded timestep, differentiable in `τ`.
    pub fn alpha_bar_on_tape(&self, tape: &mut Tape, t: Var) -> Var {
        let l = tape.map(t, |x| self.log_snr_continuous(x));
        tape.sigmoid(l)
    }

    /// Content hash of `(kind, T, ᾱ)`; stamped into sampler checkpoints.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.kind.label().as_bytes());
        h.update((self.len() as u64).to_le_bytes());
        for a in &self.alpha_bars {
            h.update(a.to_le_bytes());
        }
        h.finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect::<String>()
    }

    /// `q(x_t | x_0)`: `√ᾱ_t x0 + √(1-ᾱ_t) noise`, recorded on the tape.
    pub fn forward_marginal_sample(
        &self,
        tape: &mut Tape,
        x0: Var,
        t: usize,
        noise: &Tensor,
    ) -> Result<Var> {
        if t > self.len() {
            return Err(Error::Usage(format!(
                "timestep {t} outside 1..={}",
                self.len()
            )));
        }
        let a = self.alpha_bar(t);
        let mean = tape.scale(x0, a.sqrt());
        let std = tape.constant(Tensor::scalar((1.0 - a).sqrt()));
        tape.gaussian_reparam(mean, std, noise)
    }
}

fn pchip_slopes(y: &[f64]) -> Vec<f64> {
    let n = y.len();
    if n < 2 {
        return vec![0.0; n];
    }
    let delta: Vec<f64> = y.windows(2).map(|w| w[1] - w[0]).collect();
    let mut d = vec![0.0; n];
    d[0] = delta[0];
    d[n - 1] = delta[n - 2];
    for k in 1..n - 1 {
        let (a, b) = (delta[k - 1], delta[k]);
        d[k] = if a * b <= 0.0 {
            0.0
        } else {
            // Harmonic mean keeps the interpolant monotone on unit spacing.
            2.0 * a * b / (a + b)
        };
    }
    d
}
