//! The K-step lattice of posterior coefficients and the marginal recursion.

use crate::error::{Error, Result};
use crate::tensorgrad::{Tape, Tensor, Var};

/// Posterior coefficients on lattice indices `1..=K`.
///
/// Index `t` is stored at position `t - 1`. `mu0[t-1]` is `μ_{t,0}`,
/// `mu_hist[t-1][u-t-1]` is `μ_{t,u}` for `u = t+1..=K` (`None` means the
/// coefficient is structurally zero) and `sigma[t-1]` is `σ_t`. Row `K` is the
/// terminal factor `(√ᾱ_K, √(1-ᾱ_K))` and has no history.
#[derive(Clone, Debug, PartialEq)]
pub struct Lattice<S> {
    pub k: usize,
    pub mu0: Vec<S>,
    pub mu_hist: Vec<Vec<Option<S>>>,
    pub sigma: Vec<S>,
}

impl<S: Clone> Lattice<S> {
    pub fn validate(&self) -> Result<()> {
        let k = self.k;
        if k == 0 {
            return Err(Error::Structural("lattice needs K >= 1".into()));
        }
        if self.mu0.len() != k || self.sigma.len() != k || self.mu_hist.len() != k {
            return Err(Error::Structural(format!(
                "lattice with K={k} has {} mean rows, {} history rows and {} sigmas",
                self.mu0.len(),
                self.mu_hist.len(),
                self.sigma.len()
            )));
        }
        for (i, row) in self.mu_hist.iter().enumerate() {
            if row.len() != k - i - 1 {
                return Err(Error::Structural(format!(
                    "history row for t={} has {} entries, expected {}",
                    i + 1,
                    row.len(),
                    k - i - 1
                )));
            }
        }
        Ok(())
    }

    /// `μ_{t,u}` for `u > t`.
    pub fn mu(&self, t: usize, u: usize) -> Option<&S> {
        self.mu_hist[t - 1].get(u - t - 1).and_then(Option::as_ref)
    }

    pub fn map<R>(&self, mut f: impl FnMut(&S) -> R) -> Lattice<R> {
        let mu0 = self.mu0.iter().map(&mut f).collect();
        let mut mu_hist = Vec::with_capacity(self.k);
        for r in &self.mu_hist {
            mu_hist.push(r.iter().map(|c| c.as_ref().map(&mut f)).collect());
        }
        let sigma = self.sigma.iter().map(&mut f).collect();
        Lattice {
            k: self.k,
            mu0,
            mu_hist,
            sigma,
        }
    }
}

/// One iterate of the recursion for a fixed `t`: `x_t` expressed through
/// `x_0` and the states `x_{t+i}..x_K` plus independent noise of variance `v`.
#[derive(Clone, Debug, PartialEq)]
pub struct MarginalRow<S> {
    pub a0: S,
    /// Coefficients on `x_u` for `u = first..=K`.
    pub first: usize,
    pub hist: Vec<Option<S>>,
    pub v: S,
}

impl<S> MarginalRow<S> {
    pub fn coefficient(&self, u: usize) -> Option<&S> {
        if u < self.first {
            return None;
        }
        self.hist.get(u - self.first).and_then(Option::as_ref)
    }
}

/// All iterates `a^{(i)}_{tu}`, `v_t^{(i)}` for `i = 1..=K-t+1`.
#[derive(Clone, Debug, PartialEq)]
pub struct MarginalTable<S> {
    pub k: usize,
    pub rows: Vec<Vec<MarginalRow<S>>>,
}

impl<S: Clone> MarginalTable<S> {
    /// Iterate `i` (1-based) for step `t`.
    pub fn row(&self, t: usize, i: usize) -> &MarginalRow<S> {
        &self.rows[t - 1][i - 1]
    }

    pub fn marginal_a(&self, t: usize) -> S {
        self.rows[t - 1].last().expect("non-empty").a0.clone()
    }

    pub fn marginal_v(&self, t: usize) -> S {
        self.rows[t - 1].last().expect("non-empty").v.clone()
    }

    pub fn map<R>(&self, f: impl Fn(&S) -> R) -> MarginalTable<R> {
        MarginalTable {
            k: self.k,
            rows: self
                .rows
                .iter()
                .map(|rs| {
                    rs.iter()
                        .map(|r| MarginalRow {
                            a0: f(&r.a0),
                            first: r.first,
                            hist: r.hist.iter().map(|c| c.as_ref().map(&f)).collect(),
                            v: f(&r.v),
                        })
                        .collect()
                })
                .collect(),
        }
    }
}

fn fma(tape: &mut Tape, c: Var, m: Var, acc: Option<Var>) -> Result<Var> {
    let p = tape.mul(c, m)?;
    match acc {
        Some(a) => tape.add(p, a),
        None => Ok(p),
    }
}

/// Marginal coefficients of every lattice state, recorded on `tape`.
///
/// Starting from `a^{(1)}_{tu} = μ_{tu}` and `v^{(1)}_t = σ_t²`, each iterate
/// substitutes the posterior of `x_{t+i}`:
/// `a^{(i+1)}_{tu} = a^{(i)}_{t,t+i} μ_{t+i,u} + a^{(i)}_{tu}` and
/// `v^{(i+1)}_t = v^{(i)}_t + (a^{(i)}_{t,t+i} σ_{t+i})²`.
pub fn theorem1_marginals(tape: &mut Tape, lattice: &Lattice<Var>) -> Result<MarginalTable<Var>> {
    lattice.validate()?;
    let k = lattice.k;
    let mut rows = Vec::with_capacity(k);
    for t in 1..=k {
        let mut iterates = Vec::with_capacity(k - t + 1);
        let mut row = MarginalRow {
            a0: lattice.mu0[t - 1],
            first: t + 1,
            hist: lattice.mu_hist[t - 1].clone(),
            v: tape.square(lattice.sigma[t - 1]),
        };
        for i in 1..=k - t {
            let s = t + i;
            let c = row.hist.first().copied().flatten();
            let rest = row.hist[1..].to_vec();
            let next = match c {
                None => MarginalRow {
                    a0: row.a0,
                    first: s + 1,
                    hist: rest,
                    v: row.v,
                },
                Some(c) => {
                    let a0 = fma(tape, c, lattice.mu0[s - 1], Some(row.a0))?;
                    let mut hist = Vec::with_capacity(rest.len());
                    for (j, prev) in rest.into_iter().enumerate() {
                        let u = s + 1 + j;
                        hist.push(match lattice.mu(s, u) {
                            Some(&m) => Some(fma(tape, c, m, prev)?),
                            None => prev,
                        });
                    }
                    let cs = tape.mul(c, lattice.sigma[s - 1])?;
                    let sq = tape.square(cs);
                    let v = tape.add(row.v, sq)?;
                    MarginalRow {
                        a0,
                        first: s + 1,
                        hist,
                        v,
                    }
                }
            };
            iterates.push(row);
            row = next;
        }
        iterates.push(row);
        rows.push(iterates);
    }
    Ok(MarginalTable { k, rows })
}

/// [`theorem1_marginals`] on plain numbers.
pub fn theorem1_marginals_plain(lattice: &Lattice<f64>) -> Result<MarginalTable<f64>> {
    let mut tape = Tape::new();
    let vars = lattice.map(|&x| tape.constant(Tensor::scalar(x)));
    let table = theorem1_marginals(&mut tape, &vars)?;
    Ok(table.map(|&v| tape.value(v).item()))
}
