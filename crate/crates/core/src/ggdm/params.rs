use serde::{Deserialize, Serialize};

use super::lattice::{theorem1_marginals, theorem1_marginals_plain, Lattice, MarginalTable};
use super::{
    ddim_lattice_on_tape, ddpm_posterior, ddpm_posterior_on_tape, simplex_inverse, simplex_on_tape,
    terminal_on_tape,
};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::samplers::stride::{stride_timesteps, StrideKind};
use crate::tensorgrad::{logit, softplus_inverse, Tape, Tensor, Var};

/// Off-diagonal value used for history coefficients the DDPM leaves at zero.
pub const OFF_DIAGONAL_INIT: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Ddim,
    Vars,
    Ggdm,
    GgdmPred,
}

impl Family {
    pub fn label(self) -> &'static str {
        match self {
            Family::Ddim => "ddim",
            Family::Vars => "vars",
            Family::Ggdm => "ggdm",
            Family::GgdmPred => "ggdm_pred",
        }
    }
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddim" => Ok(Family::Ddim),
            "vars" => Ok(Family::Vars),
            "ggdm" => Ok(Family::Ggdm),
            "ggdm_pred" => Ok(Family::GgdmPred),
            other => Err(Error::Usage(format!(
                "unknown family '{other}' (expected ddim, vars, ggdm or ggdm_pred)"
            ))),
        }
    }
}

/// Whether GGDM history coefficients beyond the previous state are trainable.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OffDiagonal {
    /// Every `μ_{t,u}`, `u > t`, is a parameter, initialized at `1e-4`.
    Dense,
    /// Only `μ_{t,t+1}` and `μ_{t,0}`; the remaining coefficients are exactly zero.
    Sparse,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSpec {
    pub family: Family,
    pub time: bool,
    pub off_diagonal: OffDiagonal,
    pub stride: StrideKind,
}

impl Default for SamplerSpec {
    /// GGDM with learned timesteps.
    fn default() -> Self {
        Self::new(Family::Ggdm, true)
    }
}

impl SamplerSpec {
    pub fn new(family: Family, time: bool) -> Self {
        Self {
            family,
            time,
            off_diagonal: OffDiagonal::Dense,
            stride: StrideKind::Linear,
        }
    }

    pub fn tag(&self) -> String {
        if self.time {
            format!("{}+time", self.family.label())
        } else {
            self.family.label().to_string()
        }
    }
}

/// Raw, unconstrained sampler variables for one search family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GgdmParams {
    pub spec: SamplerSpec,
    pub k: usize,
    pub t_max: usize,
    /// Base timesteps at lattice indices `1..=K`; the initial value of the
    /// searched times under `time`.
    pub stride: Vec<usize>,
    /// Per `t = 1..K-1`: `[μ_{t,0}, μ_{t,t+1}, μ_{t,t+2}, ...]` (sigmoid scale).
    pub raw_mu: Vec<f64>,
    /// Per `t = 1..K-1`.
    pub raw_sigma: Vec<f64>,
    pub raw_vars: Vec<f64>,
    pub raw_time: Vec<f64>,
    /// Per `t = 1..K`.
    pub raw_pred_a: Vec<f64>,
    pub raw_pred_b: Vec<f64>,
    pub schedule_fingerprint: String,
}

/// The raw variables registered on a tape, by group name.
#[derive(Clone, Debug)]
pub struct RawVars {
    pub groups: Vec<(&'static str, Var)>,
}

impl RawVars {
    pub fn get(&self, name: &str) -> Option<Var> {
        self.groups.iter().find(|(n, _)| *n == name).map(|&(_, v)| v)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.groups.iter().map(|&(_, v)| v).collect()
    }
}

/// Transformed sampler quantities on a tape.
#[derive(Clone, Debug)]
pub struct SamplerView {
    /// `τ_1..τ_K` on the base time scale.
    pub times: Vec<Var>,
    pub alpha_bars: Vec<Var>,
    pub lattice: Lattice<Var>,
    pub marginals: MarginalTable<Var>,
    pub pred: Option<(Vec<Var>, Vec<Var>)>,
}

impl SamplerView {
    /// A view over fixed coefficients (no trainable variables).
    pub fn from_lattice(tape: &mut Tape, times: &[f64], lattice: &Lattice<f64>) -> Result<Self> {
        lattice.validate()?;
        if times.len() != lattice.k {
            return Err(Error::Structural(format!(
                "{} times for a K={} lattice",
                times.len(),
                lattice.k
            )));
        }
        let times = times.iter().map(|&t| tape.constant(Tensor::scalar(t))).collect();
        let lattice = lattice.map(|&x| tape.constant(Tensor::scalar(x)));
        let marginals = theorem1_marginals(tape, &lattice)?;
        let k = lattice.k;
        let alpha_bars = (1..=k)
            .map(|t| {
                let a = tape.value(marginals.marginal_a(t)).item();
                tape.constant(Tensor::scalar(a * a))
            })
            .collect();
        Ok(Self {
            times,
            alpha_bars,
            lattice,
            marginals,
            pred: None,
        })
    }
}

/// Plain-number snapshot of a [`SamplerView`].
#[derive(Clone, Debug, PartialEq)]
pub struct SamplerValues {
    pub times: Vec<f64>,
    pub alpha_bars: Vec<f64>,
    pub lattice: Lattice<f64>,
    pub marginals: MarginalTable<f64>,
    pub pred: Option<(Vec<f64>, Vec<f64>)>,
}

fn checked_logit(name: String, p: f64) -> Result<f64> {
    if p > 0.0 && p < 1.0 && p.is_finite() {
        Ok(logit(p))
    } else {
        Err(Error::Initialization { name, value: p })
    }
}

fn mu_row_len(spec: &SamplerSpec, k: usize, t: usize) -> usize {
    match spec.off_diagonal {
        OffDiagonal::Dense => 1 + (k - t),
        OffDiagonal::Sparse => 2,
    }
}

/// Parameters whose sampler reproduces the `K`-substep DDPM ancestral sampler
/// on the chosen stride (up to the off-diagonal `1e-4` for dense GGDM, and the
/// exactly-zero terminal variance of VARS).
pub fn init_from_ddpm(schedule: &NoiseSchedule, k: usize, spec: SamplerSpec) -> Result<GgdmParams> {
    let t_max = schedule.len();
    let stride = stride_timesteps(t_max, k, spec.stride)?;
    let ab: Vec<f64> = stride.iter().map(|&t| schedule.alpha_bar(t)).collect();
    let mut p = GgdmParams {
        spec,
        k,
        t_max,
        stride: stride.clone(),
        raw_mu: Vec::new(),
        raw_sigma: Vec::new(),
        raw_vars: Vec::new(),
        raw_time: Vec::new(),
        raw_pred_a: Vec::new(),
        raw_pred_b: Vec::new(),
        schedule_fingerprint: schedule.fingerprint(),
    };
    let posterior = |t: usize| ddpm_posterior(ab[t - 1], ab[t]);

    match spec.family {
        Family::Ggdm | Family::GgdmPred => {
            for t in 1..k {
                let (mu_u, mu_0, var) = posterior(t);
                p.raw_mu.push(checked_logit(format!("mu[{t},0]"), mu_0)?);
                p.raw_mu.push(checked_logit(format!("mu[{t},{}]", t + 1), mu_u)?);
                for _ in 2..mu_row_len(&spec, k, t) {
                    p.raw_mu.push(logit(OFF_DIAGONAL_INIT));
                }
                p.raw_sigma.push(checked_logit(format!("sigma[{t}]"), var.sqrt())?);
            }
        }
        Family::Ddim => {
            for t in 1..k {
                let (_, _, var) = posterior(t);
                let frac = (var / (1.0 - ab[t - 1])).sqrt();
                p.raw_sigma.push(checked_logit(format!("sigma_scale[{t}]"), frac)?);
            }
        }
        Family::Vars => {
            let mut v: Vec<f64> = ab[..k - 1].iter().map(|a| 1.0 - a).collect();
            v.push(1.0);
            p.raw_vars = simplex_inverse(&v);
        }
    }
    if spec.time {
        let fractions: Vec<f64> = stride.iter().map(|&t| t as f64 / t_max as f64).collect();
        p.raw_time = simplex_inverse(&fractions);
    }
    if spec.family == Family::GgdmPred {
        let mut plain = p.clone();
        plain.spec.family = Family::Ggdm;
        let values = plain.values(schedule)?;
        for t in 1..=k {
            let a = values.marginals.marginal_a(t);
            let v = values.marginals.marginal_v(t);
            let (pa, pb) = (1.0 / a, v.sqrt() / a);
            if pa <= 1.0 || pb <= 0.0 || !pa.is_finite() {
                return Err(Error::Initialization {
                    name: format!("pred[{t}]"),
                    value: pa,
                });
            }
            p.raw_pred_a.push(softplus_inverse(pa - 1.0));
            p.raw_pred_b.push(softplus_inverse(pb));
        }
    }
    Ok(p)
}

impl GgdmParams {
    /// Non-empty raw groups in a fixed order.
    pub fn groups(&self) -> Vec<(&'static str, &Vec<f64>)> {
        [
            ("raw_mu", &self.raw_mu),
            ("raw_sigma", &self.raw_sigma),
            ("raw_vars", &self.raw_vars),
            ("raw_time", &self.raw_time),
            ("raw_pred_a", &self.raw_pred_a),
            ("raw_pred_b", &self.raw_pred_b),
        ]
        .into_iter()
        .filter(|(_, v)| !v.is_empty())
        .collect()
    }

    fn group_mut(&mut self, name: &str) -> Option<&mut Vec<f64>> {
        match name {
            "raw_mu" => Some(&mut self.raw_mu),
            "raw_sigma" => Some(&mut self.raw_sigma),
            "raw_vars" => Some(&mut self.raw_vars),
            "raw_time" => Some(&mut self.raw_time),
            "raw_pred_a" => Some(&mut self.raw_pred_a),
            "raw_pred_b" => Some(&mut self.raw_pred_b),
            _ => None,
        }
    }

    pub fn group_tensors(&self) -> Vec<Tensor> {
        self.groups()
            .into_iter()
            .map(|(_, v)| Tensor::vector(v.clone()))
            .collect()
    }

    /// Replaces group values, in the order of [`GgdmParams::groups`].
    pub fn set_group_tensors(&mut self, values: &[Tensor]) -> Result<()> {
        let names: Vec<&'static str> = self.groups().iter().map(|(n, _)| *n).collect();
        if names.len() != values.len() {
            return Err(Error::Structural(format!(
                "expected {} parameter groups, got {}",
                names.len(),
                values.len()
            )));
        }
        for (name, t) in names.into_iter().zip(values) {
            let slot = self.group_mut(name).expect("known group");
            if slot.len() != t.numel() {
                return Err(Error::Structural(format!(
                    "group {name} has {} entries, got {}",
                    slot.len(),
                    t.numel()
                )));
            }
            *slot = t.to_vec();
        }
        Ok(())
    }

    /// Sets one named group (checkpoint loading).
    pub fn set_group(&mut self, name: &str, values: Vec<f64>) -> Result<()> {
        let slot = self
            .group_mut(name)
            .ok_or_else(|| Error::Format(format!("unknown parameter group {name}")))?;
        *slot = values;
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.groups().iter().map(|(_, v)| v.len()).sum()
    }

    /// Checks group sizes against the family, `K` and the off-diagonal mode.
    pub fn validate(&self) -> Result<()> {
        let k = self.k;
        if k == 0 || self.stride.len() != k {
            return Err(Error::Structural(format!(
                "K={k} with {} stride entries",
                self.stride.len()
            )));
        }
        let mu_len: usize = (1..k).map(|t| mu_row_len(&self.spec, k, t)).sum();
        let fam = self.spec.family;
        let ggdm = matches!(fam, Family::Ggdm | Family::GgdmPred);
        let expect = [
            ("raw_mu", self.raw_mu.len(), if ggdm { mu_len } else { 0 }),
            (
                "raw_sigma",
                self.raw_sigma.len(),
                if fam == Family::Vars { 0 } else { k - 1 },
            ),
            ("raw_vars", self.raw_vars.len(), if fam == Family::Vars { k - 1 } else { 0 }),
            ("raw_time", self.raw_time.len(), if self.spec.time { k - 1 } else { 0 }),
            ("raw_pred_a", self.raw_pred_a.len(), if fam == Family::GgdmPred { k } else { 0 }),
            ("raw_pred_b", self.raw_pred_b.len(), if fam == Family::GgdmPred { k } else { 0 }),
        ];
        for (name, got, want) in expect {
            if got != want {
                return Err(Error::Structural(format!(
                    "{} sampler with K={k}: {name} has {got} entries, expected {want}",
                    self.spec.tag()
                )));
            }
        }
        Ok(())
    }

    /// Refuses a schedule other than the one these parameters were built for.
    pub fn check_schedule(&self, schedule: &NoiseSchedule) -> Result<()> {
        let found = schedule.fingerprint();
        if found != self.schedule_fingerprint {
            return Err(Error::FingerprintMismatch {
                expected: self.schedule_fingerprint.clone(),
                found,
            });
        }
        Ok(())
    }

    /// Records every raw group as a leaf (`trainable`) or a constant.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> RawVars {
        let groups = self
            .groups()
            .into_iter()
            .map(|(name, v)| {
                let t = Tensor::vector(v.clone());
                let var = if trainable { tape.leaf(t) } else { tape.constant(t) };
                (name, var)
            })
            .collect();
        RawVars { groups }
    }

    /// Builds the transformed sampler on `tape` from registered raw variables.
    pub fn view(&self, tape: &mut Tape, raw: &RawVars, schedule: &NoiseSchedule) -> Result<SamplerView> {
        self.validate()?;
        let k = self.k;
        let missing = |name: &str| Error::Structural(format!("raw group {name} not registered"));

        let (times, alpha_bars) = if self.spec.time {
            let r = raw.get("raw_time").ok_or_else(|| missing("raw_time"))?;
            let frac = simplex_on_tape(tape, r)?;
            let tau = tape.scale(frac, self.t_max as f64);
            let mut times = Vec::with_capacity(k);
            let mut abs = Vec::with_capacity(k);
            for i in 0..k {
                let t = tape.pick(tau, i)?;
                abs.push(schedule.alpha_bar_on_tape(tape, t));
                times.push(t);
            }
            (times, abs)
        } else {
            let times = self
                .stride
                .iter()
                .map(|&t| tape.constant(Tensor::scalar(t as f64)))
                .collect();
            let abs = self
                .stride
                .iter()
                .map(|&t| tape.constant(Tensor::scalar(schedule.alpha_bar(t))))
                .collect();
            (times, abs)
        };

        let lattice = match self.spec.family {
            Family::Ggdm | Family::GgdmPred => {
                let rm = raw.get("raw_mu").ok_or_else(|| missing("raw_mu"))?;
                let rs = raw.get("raw_sigma").ok_or_else(|| missing("raw_sigma"))?;
                let mu = tape.sigmoid(rm);
                let sg = tape.sigmoid(rs);
                let mut mu0 = Vec::with_capacity(k);
                let mut mu_hist = Vec::with_capacity(k);
                let mut sigma = Vec::with_capacity(k);
                let mut offset = 0;
                for t in 1..k {
                    let len = mu_row_len(&self.spec, k, t);
                    mu0.push(tape.pick(mu, offset)?);
                    let mut hist = vec![None; k - t];
                    for (j, slot) in hist.iter_mut().enumerate().take(len - 1) {
                        *slot = Some(tape.pick(mu, offset + 1 + j)?);
                    }
                    mu_hist.push(hist);
                    sigma.push(tape.pick(sg, t - 1)?);
                    offset += len;
                }
                let (m, s) = terminal_on_tape(tape, alpha_bars[k - 1])?;
                mu0.push(m);
                mu_hist.push(Vec::new());
                sigma.push(s);
                Lattice {
                    k,
                    mu0,
                    mu_hist,
                    sigma,
                }
            }
            Family::Ddim => {
                let rs = raw.get("raw_sigma").ok_or_else(|| missing("raw_sigma"))?;
                let frac = tape.sigmoid(rs);
                let mut sigma = Vec::with_capacity(k - 1);
                for t in 1..k {
                    let f = tape.pick(frac, t - 1)?;
                    let one_minus = tape.map(alpha_bars[t - 1], |x| (1.0 - x, -1.0));
                    let scale = tape.sqrt(one_minus)?;
                    sigma.push(tape.mul(scale, f)?);
                }
                ddim_lattice_on_tape(tape, &alpha_bars, &sigma)?
            }
            Family::Vars => {
                let rv = raw.get("raw_vars").ok_or_else(|| missing("raw_vars"))?;
                let v = simplex_on_tape(tape, rv)?;
                let implied = tape.map(v, |x| (1.0 - x, -1.0));
                let mut mu0 = Vec::with_capacity(k);
                let mut mu_hist = Vec::with_capacity(k);
                let mut sigma = Vec::with_capacity(k);
                for t in 1..k {
                    let a_s = tape.pick(implied, t - 1)?;
                    let mut hist = vec![None; k - t];
                    if t + 1 < k {
                        let a_u = tape.pick(implied, t)?;
                        let (mu_u, mu_0, sd) = ddpm_posterior_on_tape(tape, a_s, a_u)?;
                        hist[0] = Some(mu_u);
                        mu0.push(mu_0);
                        sigma.push(sd);
                    } else {
                        // ᾱ'_K = 0: the posterior ignores x_K entirely.
                        mu0.push(tape.sqrt(a_s)?);
                        let one_minus = tape.map(a_s, |x| (1.0 - x, -1.0));
                        sigma.push(tape.sqrt(one_minus)?);
                    }
                    mu_hist.push(hist);
                }
                let (m, s) = terminal_on_tape(tape, alpha_bars[k - 1])?;
                mu0.push(m);
                mu_hist.push(Vec::new());
                sigma.push(s);
                Lattice {
                    k,
                    mu0,
                    mu_hist,
                    sigma,
                }
            }
        };

        let marginals = theorem1_marginals(tape, &lattice)?;
        let pred = if self.spec.family == Family::GgdmPred {
            let ra = raw.get("raw_pred_a").ok_or_else(|| missing("raw_pred_a"))?;
            let rb = raw.get("raw_pred_b").ok_or_else(|| missing("raw_pred_b"))?;
            let a = tape.softplus(ra);
            let a = tape.add_scalar(a, 1.0);
            let b = tape.softplus(rb);
            let mut av = Vec::with_capacity(k);
            let mut bv = Vec::with_capacity(k);
            for t in 0..k {
                av.push(tape.pick(a, t)?);
                bv.push(tape.pick(b, t)?);
            }
            Some((av, bv))
        } else {
            None
        };
        Ok(SamplerView {
            times,
            alpha_bars,
            lattice,
            marginals,
            pred,
        })
    }

    /// Transformed quantities as plain numbers.
    pub fn values(&self, schedule: &NoiseSchedule) -> Result<SamplerValues> {
        let mut tape = Tape::new();
        let raw = self.register(&mut tape, false);
        let view = self.view(&mut tape, &raw, schedule)?;
        let val = |v: &Var| tape.value(*v).item();
        let lattice = view.lattice.map(val);
        Ok(SamplerValues {
            times: view.times.iter().map(val).collect(),
            alpha_bars: view.alpha_bars.iter().map(val).collect(),
            marginals: theorem1_marginals_plain(&lattice)?,
            lattice,
            pred: view
                .pred
                .as_ref()
                .map(|(a, b)| (a.iter().map(val).collect(), b.iter().map(val).collect())),
        })
    }
}
