use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensorgrad::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    /// `k(x, y) = xᵀy`.
    Linear,
    /// `k(x, y) = (xᵀy / d + 1)³`.
    Cubic,
}

impl std::str::FromStr for KernelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(KernelKind::Linear),
            "cubic" => Ok(KernelKind::Cubic),
            other => Err(Error::Usage(format!(
                "unknown kernel '{other}' (expected linear or cubic)"
            ))),
        }
    }
}

impl KernelKind {
    pub fn label(self) -> &'static str {
        match self {
            KernelKind::Linear => "linear",
            KernelKind::Cubic => "cubic",
        }
    }

    fn on_dot(self, dot: f64, d: usize) -> f64 {
        match self {
            KernelKind::Linear => dot,
            KernelKind::Cubic => (dot / d as f64 + 1.0).powi(3),
        }
    }
}

pub fn kernel_eval(kind: KernelKind, fx: &[f64], fy: &[f64]) -> Result<f64> {
    if fx.len() != fy.len() {
        return Err(shape_err(
            "kernel_eval",
            format!("feature dimensions {} and {}", fx.len(), fy.len()),
        ));
    }
    let dot: f64 = fx.iter().zip(fy).map(|(a, b)| a * b).sum();
    Ok(kind.on_dot(dot, fx.len()))
}

fn check_pair(fp: &[usize], fq: &[usize]) -> Result<()> {
    if fp.len() != 2 || fq.len() != 2 || fp[1] != fq[1] {
        return Err(shape_err(
            "kid_unbiased",
            format!("feature batches {fp:?} and {fq:?}"),
        ));
    }
    if fp[0] < 2 || fq[0] < 2 {
        return Err(Error::Usage(format!(
            "the unbiased estimator needs at least 2 samples per side, got {} and {}",
            fp[0], fq[0]
        )));
    }
    Ok(())
}

/// `(1/(n(n-1))) Σ_{i≠j} k(x_i, x_j)` for fixed features.
pub fn within_term(kind: KernelKind, f: &Tensor) -> f64 {
    let (n, d) = (f.rows(), f.cols());
    let mut total = 0.0;
    match kind {
        KernelKind::Linear => {
            let mut s = vec![0.0; d];
            let mut diag = 0.0;
            for i in 0..n {
                for (sj, v) in s.iter_mut().zip(f.row(i)) {
                    *sj += v;
                    diag += v * v;
                }
            }
            total = s.iter().map(|v| v * v).sum::<f64>() - diag;
        }
        KernelKind::Cubic => {
            let g = f.matmul_nt(f).expect("2-D features");
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        total += kind.on_dot(g.data()[i * n + j], d);
                    }
                }
            }
        }
    }
    total / (n * (n - 1)) as f64
}

/// Unbiased squared MMD between generated features `fp` (on the tape) and
/// fixed features `fq`:
/// `mean_{i≠j} k(p_i,p_j) - 2 mean_{i,j} k(p_i,q_j) + mean_{i≠j} k(q_i,q_j)`.
/// The last term does not depend on `fp` and is added as a constant.
pub fn kid_unbiased(tape: &mut Tape, kind: KernelKind, fp: Var, fq: &Tensor) -> Result<Var> {
    let pshape = tape.shape(fp).to_vec();
    check_pair(&pshape, fq.shape())?;
    let (n, m, d) = (pshape[0], fq.rows(), pshape[1]);
    let qq = within_term(kind, fq);
    let (pp, pq) = match kind {
        KernelKind::Linear => {
            let s = tape.sum_rows(fp)?;
            let ss = tape.square(s);
            let ss = tape.sum(ss);
            let sq = tape.square(fp);
            let diag = tape.sum(sq);
            let off = tape.sub(ss, diag)?;
            let pp = tape.scale(off, 1.0 / (n * (n - 1)) as f64);
            let mut q_sum = vec![0.0; d];
            for i in 0..m {
                for (a, b) in q_sum.iter_mut().zip(fq.row(i)) {
                    *a += b;
                }
            }
            let qs = tape.constant(Tensor::vector(q_sum));
            let cross = tape.mul(s, qs)?;
            let cross = tape.sum(cross);
            (pp, tape.scale(cross, 2.0 / (n * m) as f64))
        }
        KernelKind::Cubic => {
            let inv_d = 1.0 / d as f64;
            let cube = |x: f64| {
                let b = x * inv_d + 1.0;
                (b * b * b, 3.0 * b * b * inv_d)
            };
            let pt = tape.transpose(fp)?;
            let g = tape.matmul(fp, pt)?;
            let kg = tape.map(g, cube);
            let all = tape.sum(kg);
            let sq = tape.square(fp);
            let norms = tape.sum_cols(sq)?;
            let kd = tape.map(norms, cube);
            let diag = tape.sum(kd);
            let off = tape.sub(all, diag)?;
            let pp = tape.scale(off, 1.0 / (n * (n - 1)) as f64);
            let qt = tape.constant(fq.transpose()?);
            let c = tape.matmul(fp, qt)?;
            let kc = tape.map(c, cube);
            let cross = tape.sum(kc);
            (pp, tape.scale(cross, 2.0 / (n * m) as f64))
        }
    };
    let diff = tape.sub(pp, pq)?;
    Ok(tape.add_scalar(diff, qq))
}

/// [`kid_unbiased`] on fixed features.
pub fn kid_plain(kind: KernelKind, fp: &Tensor, fq: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(fp.clone());
    let k = kid_unbiased(&mut tape, kind, p, fq)?;
    Ok(tape.value(k).item())
}
