use crate::error::{domain_err, shape_err, Error, Result};
use crate::search::kernel::within_term;
use crate::search::{kid_plain, median_pairwise_distance, KernelKind};
use crate::tensorgrad::Tensor;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Median heuristic bandwidth over the pooled samples (up to 1000 rows each).
pub fn median_bandwidth(a: &Tensor, b: &Tensor) -> Result<f64> {
    let take = |x: &Tensor| x.data()[..x.cols() * x.rows().min(1000)].to_vec();
    let mut pooled = take(a);
    pooled.extend(take(b));
    let rows = pooled.len() / a.cols();
    let t = Tensor::new(vec![rows, a.cols()], pooled)?;
    Ok(median_pairwise_distance(&t, 2000))
}

/// Unbiased squared MMD with the Gaussian kernel `exp(-‖x-y‖²/(2h²))`.
///
/// For equal sample counts the cross term also skips `i = j`, so the
/// estimator is exactly zero on identical sets; otherwise the cross term runs
/// over all pairs. Both forms are unbiased. `bandwidth = None` uses the
/// median heuristic.
pub fn rbf_mmd(a: &Tensor, b: &Tensor, bandwidth: Option<f64>) -> Result<f64> {
    if a.ndim() != 2 || b.ndim() != 2 || a.cols() != b.cols() {
        return Err(shape_err("rbf_mmd", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let (n, m) = (a.rows(), b.rows());
    if n < 2 || m < 2 {
        return Err(Error::Usage("rbf_mmd needs at least 2 samples per side".into()));
    }
    let h = match bandwidth {
        Some(h) => h,
        None => median_bandwidth(a, b)?,
    };
    if !(h > 0.0 && h.is_finite()) {
        return Err(domain_err("rbf_mmd", format!("degenerate bandwidth {h}")));
    }
    let g = -0.5 / (h * h);
    let k = |x: &[f64], y: &[f64]| (g * sq_dist(x, y)).exp();
    let within = |x: &Tensor| {
        let r = x.rows();
        let mut s = 0.0;
        for i in 0..r {
            for j in i + 1..r {
                s += k(x.row(i), x.row(j));
            }
        }
        2.0 * s / (r * (r - 1)) as f64
    };
    let mut cross = 0.0;
    for i in 0..n {
        for j in 0..m {
            if n != m || i != j {
                cross += k(a.row(i), b.row(j));
            }
        }
    }
    let pairs = if n == m { n * (n - 1) } else { n * m };
    Ok(within(a) + within(b) - 2.0 * cross / pairs as f64)
}

/// KID for reporting. With equal sample counts the cross term skips `i = j`,
/// matching [`rbf_mmd`], so identical sets score exactly zero; otherwise this
/// is the search estimator.
pub fn kid_paired(kind: KernelKind, fp: &Tensor, fq: &Tensor) -> Result<f64> {
    if fp.ndim() != 2 || fq.ndim() != 2 || fp.rows() != fq.rows() || fp.cols() != fq.cols() {
        return kid_plain(kind, fp, fq);
    }
    let (n, d) = (fp.rows(), fp.cols());
    if n < 2 {
        return Err(Error::Usage("kid needs at least 2 samples per side".into()));
    }
    let cross_all = match kind {
        KernelKind::Linear => {
            let sum = |f: &Tensor| {
                let mut s = vec![0.0; d];
                for i in 0..n {
                    s.iter_mut().zip(f.row(i)).for_each(|(a, b)| *a += b);
                }
                s
            };
            let diag: f64 = (0..n)
                .map(|i| fp.row(i).iter().zip(fq.row(i)).map(|(a, b)| a * b).sum::<f64>())
                .sum();
            sum(fp).iter().zip(sum(fq)).map(|(a, b)| a * b).sum::<f64>() - diag
        }
        KernelKind::Cubic => {
            let g = fp.matmul_nt(fq)?;
            let cube = |x: f64| (x / d as f64 + 1.0).powi(3);
            let mut total = 0.0;
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        total += cube(g.data()[i * n + j]);
                    }
                }
            }
            total
        }
    };
    Ok(within_term(kind, fp) + within_term(kind, fq) - 2.0 * cross_all / (n * (n - 1)) as f64)
}

/// Minimum-cost perfect assignment for a square cost function (Hungarian
/// method with potentials, `O(n³)`). Returns `assignment[row] = column`.
pub fn min_cost_assignment(n: usize, cost: impl Fn(usize, usize) -> f64) -> Vec<usize> {
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![inf; n + 1];
    let mut used = vec![false; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        minv.fill(inf);
        used.fill(false);
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        assignment[p[j] - 1] = j - 1;
    }
    assignment
}

/// Exact 2-Wasserstein distance between equal-size empirical sets.
pub fn wasserstein2_2d(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.ndim() != 2 || b.ndim() != 2 || a.cols() != 2 || b.cols() != 2 {
        return Err(shape_err(
            "wasserstein2_2d",
            format!("{:?} vs {:?}, expected [n, 2]", a.shape(), b.shape()),
        ));
    }
    if a.rows() != b.rows() {
        return Err(Error::Usage(format!(
            "wasserstein2_2d needs equal counts, got {} and {}",
            a.rows(),
            b.rows()
        )));
    }
    let n = a.rows();
    if n == 0 {
        return Ok(0.0);
    }
    let (ad, bd) = (a.data(), b.data());
    let cost = |i: usize, j: usize| {
        let dx = ad[2 * i] - bd[2 * j];
        let dy = ad[2 * i + 1] - bd[2 * j + 1];
        dx * dx + dy * dy
    };
    let assignment = min_cost_assignment(n, cost);
    let total: f64 = assignment.iter().enumerate().map(|(i, &j)| cost(i, j)).sum();
    Ok((total / n as f64).sqrt())
}

/// Fraction of `centers` with at least one sample within `radius`.
pub fn mode_coverage(samples: &Tensor, centers: &[[f64; 2]], radius: f64) -> f64 {
    if centers.is_empty() {
        return 0.0;
    }
    let r2 = radius * radius;
    let hit = centers
        .iter()
        .filter(|c| (0..samples.rows()).any(|i| sq_dist(samples.row(i), &c[..]) <= r2))
        .count();
    hit as f64 / centers.len() as f64
}
