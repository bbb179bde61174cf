//! Independent oracles and reusable checks shared by the integration tests and
//! the acceptance harness. Each check returns a measured error so callers can
//! both assert and report it.

#![allow(dead_code)]

use std::rc::Rc;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ddss::diffusion::{NetworkConfig, NoiseSchedule, ScoreNetwork};
use ddss::ggdm::{
    ddim_embedding, init_from_ddpm, theorem1_marginals, theorem1_marginals_plain, Family, GgdmParams, Lattice,
    OffDiagonal, SamplerSpec,
};
use ddss::rng::NoiseStream;
use ddss::samplers::{
    sample_ddim, sample_ddpm_stride, sample_ggdm, sample_ggdm_on_tape, sample_lattice, stride_timesteps, DdimNoise,
    Draw, SampleBatch, StrideKind,
};
use ddss::search::{
    apply_update, evaluate_step, kernel_eval, kid_plain, kid_unbiased, step_noise, AdamConfig, AdamState, FeatureMap,
    KernelKind,
};
use ddss::tensorgrad::{finite_difference, relative_error, Recipe, Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;
pub const FD_FLOOR: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(lo..hi)).collect()).unwrap()
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn tiny_net(t_max: usize, seed: u64) -> Arc<ScoreNetwork> {
    Arc::new(ScoreNetwork::init(
        NetworkConfig {
            data_dim: 2,
            hidden: 16,
            layers: 2,
            embed_dim: 8,
            t_max,
        },
        seed,
    ))
}

// ---------------------------------------------------------------------------
// Forward composition oracle for the marginal recursion.

/// Composes the Gaussian conditionals of a lattice step by step, tracking each
/// state as an explicit linear form `A_t x_0 + Σ_j c_{t,j} z_j` over the
/// independent noise sources. Returns `(A_t, Σ_j c_{t,j}²)` for `t = 1..K`.
pub fn forward_composition(l: &Lattice<f64>) -> Vec<(f64, f64)> {
    let k = l.k;
    // Noise source j (0-based) is the one injected when producing x_{j+1}.
    let mut a = vec![0.0; k + 1];
    let mut c = vec![vec![0.0; k]; k + 1];
    a[k] = l.mu0[k - 1];
    c[k][k - 1] = l.sigma[k - 1];
    for t in (1..k).rev() {
        a[t] = l.mu0[t - 1];
        let mut ct = vec![0.0; k];
        ct[t - 1] = l.sigma[t - 1];
        for u in t + 1..=k {
            if let Some(m) = l.mu_hist[t - 1][u - t - 1] {
                a[t] += m * a[u];
                for j in 0..k {
                    ct[j] += m * c[u][j];
                }
            }
        }
        c[t] = ct;
    }
    (1..=k).map(|t| (a[t], c[t].iter().map(|x| x * x).sum())).collect()
}

/// A random lattice with some structural zeros in the history.
pub fn random_lattice(r: &mut ChaCha8Rng, k: usize) -> Lattice<f64> {
    Lattice {
        k,
        mu0: (0..k).map(|_| r.gen_range(-1.5..1.5)).collect(),
        mu_hist: (1..=k)
            .map(|t| {
                (t + 1..=k)
                    .map(|_| (r.gen::<f64>() > 0.2).then(|| r.gen_range(-1.0..1.0)))
                    .collect()
            })
            .collect(),
        sigma: (0..k).map(|_| r.gen_range(0.0..1.2)).collect(),
    }
}

/// Worst absolute gap between the recursion and the composition oracle.
pub fn theorem1_oracle_error(instances: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let k = r.gen_range(2..=8);
        let l = random_lattice(&mut r, k);
        let table = theorem1_marginals_plain(&l).unwrap();
        for (t, (a, v)) in forward_composition(&l).into_iter().enumerate() {
            worst = worst
                .max((table.marginal_a(t + 1) - a).abs())
                .max((table.marginal_v(t + 1) - v).abs());
        }
    }
    worst
}

/// Random decreasing `ᾱ` in (0, 1) of length `k`.
pub fn random_alpha_bars(r: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..k).map(|_| r.gen_range(0.01..0.99)).collect();
    v.sort_by(|a, b| b.partial_cmp(a).unwrap());
    v.dedup();
    while v.len() < k {
        let last = *v.last().unwrap();
        v.push(last * 0.5);
    }
    v
}

/// Worst gap between embedded-DDIM marginals and `(√ᾱ_t, 1 − ᾱ_t)`.
pub fn ddim_embedding_error(schedules: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..schedules {
        let k = r.gen_range(2..=12);
        let ab = random_alpha_bars(&mut r, k);
        // Admissible σ_t ≤ √(1 − ᾱ_t), including both endpoints.
        let sigma: Vec<f64> = (0..k - 1)
            .map(|t| {
                let max = (1.0 - ab[t]).sqrt();
                match r.gen_range(0..4) {
                    0 => 0.0,
                    1 => max,
                    _ => r.gen_range(0.0..max),
                }
            })
            .collect();
        let table = theorem1_marginals_plain(&ddim_embedding(&ab, &sigma).unwrap()).unwrap();
        for t in 1..=k {
            worst = worst
                .max((table.marginal_a(t) - ab[t - 1].sqrt()).abs())
                .max((table.marginal_v(t) - (1.0 - ab[t - 1])).abs());
        }
    }
    worst
}

// ---------------------------------------------------------------------------
// Enumeration oracle for unbiased two-sample estimators.

pub struct Discrete {
    pub points: Vec<Vec<f64>>,
    pub probs: Vec<f64>,
}

pub fn fixed_distributions() -> (Discrete, Discrete) {
    (
        Discrete {
            points: vec![vec![0.0, 1.0], vec![1.5, -0.5], vec![-1.0, 0.25]],
            probs: vec![0.2, 0.5, 0.3],
        },
        Discrete {
            points: vec![vec![0.5, 0.5], vec![-0.75, 2.0], vec![2.0, 1.0]],
            probs: vec![0.6, 0.1, 0.3],
        },
    )
}

/// `E k(x,x') + E k(y,y') − 2 E k(x,y)` with independent copies.
pub fn population_mmd2(p: &Discrete, q: &Discrete, k: &dyn Fn(&[f64], &[f64]) -> f64) -> f64 {
    let cross = |a: &Discrete, b: &Discrete| {
        let mut s = 0.0;
        for (x, px) in a.points.iter().zip(&a.probs) {
            for (y, py) in b.points.iter().zip(&b.probs) {
                s += px * py * k(x, y);
            }
        }
        s
    };
    cross(p, p) + cross(q, q) - 2.0 * cross(p, q)
}

/// Exact expectation of `estimator` over all ordered size-2 draws with
/// replacement from `p` and from `q`.
pub fn enumerate_size2(p: &Discrete, q: &Discrete, estimator: &dyn Fn(&Tensor, &Tensor) -> f64) -> f64 {
    let mut total = 0.0;
    let draws = |d: &Discrete| {
        let mut out = Vec::new();
        for i in 0..3 {
            for j in 0..3 {
                let data = [d.points[i].clone(), d.points[j].clone()].concat();
                out.push((d.probs[i] * d.probs[j], Tensor::new(vec![2, 2], data).unwrap()));
            }
        }
        out
    };
    for (wp, sp) in draws(p) {
        for (wq, sq) in draws(q) {
            total += wp * wq * estimator(&sp, &sq);
        }
    }
    total
}

/// Gap between the enumerated expectation of the KID estimator and the
/// population MMD² for `kind`.
pub fn kid_enumeration_gap(kind: KernelKind) -> f64 {
    let (p, q) = fixed_distributions();
    let population = population_mmd2(&p, &q, &|x, y| kernel_eval(kind, x, y).unwrap());
    let expected = enumerate_size2(&p, &q, &|a, b| kid_plain(kind, a, b).unwrap());
    (expected - population).abs()
}

/// Same gap for the Gaussian-kernel MMD at a fixed bandwidth.
pub fn rbf_enumeration_gap(bandwidth: f64) -> f64 {
    let (p, q) = fixed_distributions();
    let k = |x: &[f64], y: &[f64]| {
        let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum();
        (-d2 / (2.0 * bandwidth * bandwidth)).exp()
    };
    let population = population_mmd2(&p, &q, &k);
    let expected = enumerate_size2(&p, &q, &|a, b| ddss::eval::rbf_mmd(a, b, Some(bandwidth)).unwrap());
    (expected - population).abs()
}

// ---------------------------------------------------------------------------
// Finite-difference checks.

type Build = dyn Fn(&mut Tape, &[Var]) -> ddss::Result<Var>;

/// Max relative error between backprop and central differences of
/// `Σ w ⊙ f(inputs)` with fixed random weights `w`, over every input.
pub fn gradient_check(inputs: &[Tensor], f: &Build, seed: u64) -> f64 {
    let probe = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&mut tape, &vars).unwrap();
        random_tensor(&mut rng(seed), tape.shape(out), -1.0, 1.0)
    };
    let objective = |tape: &mut Tape, vars: &[Var]| {
        let out = f(tape, vars).unwrap();
        let w = tape.constant(probe.clone());
        let prod = tape.mul(out, w).unwrap();
        tape.sum(prod)
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let loss = objective(&mut tape, &vars);
    let grads = tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
        let fd = finite_difference(x, FD_STEP, |xi| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, y)| tape.constant(if i == j { xi.clone() } else { y.clone() }))
                .collect();
            let loss = objective(&mut tape, &vars);
            Ok(tape.value(loss).item())
        })
        .unwrap();
        worst = worst.max(relative_error(&analytic, &fd, FD_FLOOR));
    }
    worst
}

/// One finite-difference check per tape operation.
pub fn op_gradient_errors() -> Vec<(&'static str, f64)> {
    let mut r = rng(11);
    let m34 = random_tensor(&mut r, &[3, 4], -1.5, 1.5);
    let n34 = random_tensor(&mut r, &[3, 4], -1.5, 1.5);
    let pos34 = random_tensor(&mut r, &[3, 4], 0.5, 2.0);
    let m42 = random_tensor(&mut r, &[4, 2], -1.0, 1.0);
    let row4 = random_tensor(&mut r, &[4], -1.0, 1.0);
    let scalar = Tensor::scalar(0.7);
    let v5 = random_tensor(&mut r, &[5], -1.0, 1.0);
    let noise = random_tensor(&mut r, &[3, 4], -2.0, 2.0);

    let mut out: Vec<(&'static str, f64)> = Vec::new();
    let mut check = |name: &'static str, inputs: Vec<Tensor>, f: Box<Build>| {
        out.push((name, gradient_check(&inputs, f.as_ref(), name.len() as u64)));
    };
    check("add", vec![m34.clone(), n34.clone()], Box::new(|t, v| t.add(v[0], v[1])));
    check("add_row", vec![m34.clone(), row4.clone()], Box::new(|t, v| t.add(v[0], v[1])));
    check("sub", vec![m34.clone(), n34.clone()], Box::new(|t, v| t.sub(v[0], v[1])));
    check("sub_scalar", vec![scalar.clone(), m34.clone()], Box::new(|t, v| t.sub(v[0], v[1])));
    check("mul", vec![m34.clone(), n34.clone()], Box::new(|t, v| t.mul(v[0], v[1])));
    check("mul_scalar", vec![m34.clone(), scalar.clone()], Box::new(|t, v| t.mul(v[0], v[1])));
    check("div", vec![m34.clone(), pos34.clone()], Box::new(|t, v| t.div(v[0], v[1])));
    check("div_row", vec![m34.clone(), row4.map(|x| x + 2.0)], Box::new(|t, v| t.div(v[0], v[1])));
    check("matmul", vec![m34.clone(), m42.clone()], Box::new(|t, v| t.matmul(v[0], v[1])));
    check("scale", vec![m34.clone()], Box::new(|t, v| Ok(t.scale(v[0], -2.5))));
    check("neg", vec![m34.clone()], Box::new(|t, v| Ok(t.neg(v[0]))));
    check("add_scalar", vec![m34.clone()], Box::new(|t, v| Ok(t.add_scalar(v[0], 3.0))));
    check("sigmoid", vec![m34.clone()], Box::new(|t, v| Ok(t.sigmoid(v[0]))));
    check("softplus", vec![m34.clone()], Box::new(|t, v| Ok(t.softplus(v[0]))));
    check("silu", vec![m34.clone()], Box::new(|t, v| Ok(t.silu(v[0]))));
    check("sin", vec![m34.clone()], Box::new(|t, v| Ok(t.sin(v[0]))));
    check("cos", vec![m34.clone()], Box::new(|t, v| Ok(t.cos(v[0]))));
    check("exp", vec![m34.clone()], Box::new(|t, v| Ok(t.exp(v[0]))));
    check("square", vec![m34.clone()], Box::new(|t, v| Ok(t.square(v[0]))));
    check("sqrt", vec![pos34.clone()], Box::new(|t, v| t.sqrt(v[0])));
    check("ln", vec![pos34.clone()], Box::new(|t, v| t.ln(v[0])));
    check("recip", vec![pos34.clone()], Box::new(|t, v| t.recip(v[0])));
    check(
        "map",
        vec![m34.clone()],
        Box::new(|t, v| Ok(t.map(v[0], |x| (x.tanh(), 1.0 - x.tanh().powi(2))))),
    );
    check("softmax", vec![v5.clone()], Box::new(|t, v| Ok(t.softmax(v[0]))));
    check("cumsum", vec![v5.clone()], Box::new(|t, v| Ok(t.cumsum(v[0]))));
    check("simplex_cumsum", vec![v5.clone()], Box::new(|t, v| Ok(t.simplex_cumsum(v[0]))));
    check("concat", vec![v5.clone(), row4.clone()], Box::new(|t, v| t.concat(&[v[0], v[1]])));
    check("slice", vec![v5.clone()], Box::new(|t, v| t.slice(v[0], 1, 4)));
    check("pick", vec![v5.clone()], Box::new(|t, v| t.pick(v[0], 2)));
    check("sum", vec![m34.clone()], Box::new(|t, v| Ok(t.sum(v[0]))));
    check("mean", vec![m34.clone()], Box::new(|t, v| Ok(t.mean(v[0]))));
    check("sum_rows", vec![m34.clone()], Box::new(|t, v| t.sum_rows(v[0])));
    check("sum_cols", vec![m34.clone()], Box::new(|t, v| t.sum_cols(v[0])));
    check("reshape", vec![m34.clone()], Box::new(|t, v| t.reshape(v[0], &[2, 6])));
    check("transpose", vec![m34.clone()], Box::new(|t, v| t.transpose(v[0])));
    let nz = noise.clone();
    check(
        "gaussian_reparam",
        vec![m34.clone(), pos34.clone()],
        Box::new(move |t, v| t.gaussian_reparam(v[0], v[1], &nz)),
    );
    let nz = noise.clone();
    check(
        "gaussian_reparam_row",
        vec![m34.clone(), row4.map(|x| x.abs() + 0.1)],
        Box::new(move |t, v| t.gaussian_reparam(v[0], v[1], &nz)),
    );
    check(
        "checkpoint",
        vec![m34.clone(), m42.clone()],
        Box::new(|t, v| {
            let recipe: Recipe = Rc::new(|t: &mut Tape, xs: &[Var]| {
                let h = t.matmul(xs[0], xs[1])?;
                let s = t.silu(h);
                Ok(t.square(s))
            });
            t.checkpoint(recipe, v)
        }),
    );
    check(
        "composition",
        vec![m34, m42, Tensor::vector(vec![0.3, -0.2])],
        Box::new(|t, v| {
            let h = t.matmul(v[0], v[1])?;
            let h = t.add(h, v[2])?;
            let h = t.sigmoid(h);
            let h2 = t.transpose(h)?;
            let g = t.matmul(h, h2)?;
            let g = t.softplus(g);
            t.sum_cols(g)
        }),
    );
    out
}

/// Gradient of `predict_eps`-style forward passes with respect to both the
/// input points and every network weight.
pub fn predict_eps_gradient_error() -> f64 {
    let net = tiny_net(32, 5);
    let mut r = rng(3);
    let x = random_tensor(&mut r, &[4, 2], -2.0, 2.0);
    let t = Tensor::new(vec![4, 1], vec![1.0, 7.0, 19.5, 32.0]).unwrap();
    let mut inputs = vec![x];
    inputs.extend(net.weights().iter().cloned());
    let config = net.config().clone();
    let tt = t.clone();
    let f = move |tape: &mut Tape, v: &[Var]| {
        let tv = tape.constant(tt.clone());
        let shell = ScoreNetwork::zeros(config.clone());
        shell.forward(tape, &v[1..], v[0], tv)
    };
    let err = gradient_check(&inputs, &f, 9);
    // The tape forward must agree with the plain evaluator.
    let plain = net.predict_eps(&inputs[0], 7.0).unwrap();
    let mut tape = Tape::new();
    let params = net.constants(&mut tape);
    let xv = tape.constant(inputs[0].clone());
    let tv = tape.constant(Tensor::new(vec![1, 1], vec![7.0]).unwrap());
    let out = net.forward(&mut tape, &params, xv, tv).unwrap();
    err.max(max_abs_diff(&plain, tape.value(out)))
}

pub fn kid_gradient_error(kind: KernelKind) -> f64 {
    let mut r = rng(21);
    let fp = random_tensor(&mut r, &[5, 3], -1.0, 1.0);
    let fq = random_tensor(&mut r, &[4, 3], -1.0, 1.0);
    let f = move |tape: &mut Tape, v: &[Var]| kid_unbiased(tape, kind, v[0], &fq);
    gradient_check(&[fp], &f, 2)
}

pub fn theorem1_gradient_error() -> f64 {
    let mut r = rng(8);
    let l = random_lattice(&mut r, 5);
    let mut inputs = vec![Tensor::vector(l.mu0.clone()), Tensor::vector(l.sigma.clone())];
    let hist: Vec<f64> = l.mu_hist.iter().flatten().flatten().copied().collect();
    inputs.push(Tensor::vector(hist));
    let shape = l.clone();
    let f = move |tape: &mut Tape, v: &[Var]| {
        let mut counter = 0;
        let mut hist = Vec::new();
        for row in &shape.mu_hist {
            let mut out = Vec::new();
            for m in row {
                out.push(m.map(|_| {
                    counter += 1;
                    tape.pick(v[2], counter - 1).unwrap()
                }));
            }
            hist.push(out);
        }
        let lattice = Lattice {
            k: shape.k,
            mu0: (0..shape.k).map(|i| tape.pick(v[0], i).unwrap()).collect(),
            mu_hist: hist,
            sigma: (0..shape.k).map(|i| tape.pick(v[1], i).unwrap()).collect(),
        };
        let table = theorem1_marginals(tape, &lattice)?;
        let mut parts = Vec::new();
        for t in 1..=shape.k {
            parts.push(table.marginal_a(t));
            parts.push(table.marginal_v(t));
        }
        tape.concat(&parts)
    };
    gradient_check(&inputs, &f, 4)
}

/// Gradient of a `K = 3` unrolled sampling chain with respect to every raw
/// parameter group of `family`.
pub fn chain_gradient_error(family: Family, time: bool) -> f64 {
    let schedule = NoiseSchedule::linear(16, 1e-2, 0.3).unwrap();
    let net = tiny_net(16, 3);
    let noise = NoiseStream::new(17);
    let probe = Tensor::matrix(3, 2, vec![0.4, -1.0, 0.7, 0.2, -0.5, 1.3]).unwrap();
    let base = init_from_ddpm(&schedule, 3, SamplerSpec::new(family, time)).unwrap();
    let objective = |tape: &mut Tape, p: &GgdmParams, trainable: bool| {
        let raw = p.register(tape, trainable);
        let view = p.view(tape, &raw, &schedule).unwrap();
        let chain = sample_ggdm_on_tape(tape, &net, &view, &noise, 0, 3).unwrap();
        let pv = tape.constant(probe.clone());
        let prod = tape.mul(chain.samples, pv).unwrap();
        (tape.sum(prod), raw)
    };
    let mut tape = Tape::new();
    let (loss, raw) = objective(&mut tape, &base, true);
    let grads = tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (name, values) in base.groups() {
        let g = grads.get(raw.get(name).unwrap()).unwrap();
        let fd = finite_difference(&Tensor::vector(values.clone()), FD_STEP, |x| {
            let mut p = base.clone();
            p.set_group(name, x.to_vec()).unwrap();
            let mut tape = Tape::new();
            let (loss, _) = objective(&mut tape, &p, false);
            Ok(tape.value(loss).item())
        })
        .unwrap();
        worst = worst.max(relative_error(g, &fd, FD_FLOOR));
    }
    worst
}

// ---------------------------------------------------------------------------
// Sampler equivalences and rematerialization.

pub fn trajectory_gap(a: &SampleBatch, b: &SampleBatch) -> f64 {
    let (ta, tb) = (a.trajectory.as_ref().unwrap(), b.trajectory.as_ref().unwrap());
    assert_eq!(ta.len(), tb.len());
    ta.iter().zip(tb).map(|(x, y)| max_abs_diff(x, y)).fold(0.0, f64::max)
}

/// `(ddim gap, ddpm gap)`: GGDM on the DDIM embedding vs DDIM (η ∈ {0, ½, 1}),
/// and sparse GGDM at initialization vs strided DDPM, on shared noise.
pub fn sampler_equivalence_gaps(
    model: &Arc<ScoreNetwork>,
    schedule: &NoiseSchedule,
    k: usize,
    n: usize,
    seed: u64,
) -> (f64, f64) {
    let stride = stride_timesteps(schedule.len(), k, StrideKind::Linear).unwrap();
    let ab: Vec<f64> = stride.iter().map(|&t| schedule.alpha_bar(t)).collect();
    let times: Vec<f64> = stride.iter().map(|&t| t as f64).collect();
    let draw = Draw::new(seed, n).with_trajectory();
    let mut ddim_gap: f64 = 0.0;
    for eta in [0.0, 0.5, 1.0] {
        let spec = DdimNoise::Eta(eta);
        let lattice = ddim_embedding(&ab, &spec.sigmas(schedule, &stride).unwrap()).unwrap();
        let a = sample_lattice(model, &times, &lattice, draw).unwrap();
        let b = sample_ddim(model, schedule, &stride, &spec, draw).unwrap();
        ddim_gap = ddim_gap.max(trajectory_gap(&a, &b));
    }
    let sparse = SamplerSpec {
        off_diagonal: OffDiagonal::Sparse,
        ..SamplerSpec::new(Family::Ggdm, false)
    };
    let p = init_from_ddpm(schedule, k, sparse).unwrap();
    let a = sample_ggdm(model, &p, schedule, draw).unwrap();
    let b = sample_ddpm_stride(model, schedule, &p.stride, draw).unwrap();
    (ddim_gap, trajectory_gap(&a, &b))
}

pub struct RematReport {
    /// Largest parameter difference after one Adam update, with vs without.
    pub update_gap: f64,
    pub peak_interior_remat: usize,
    pub peak_interior_plain: usize,
    pub recomputations: usize,
}

/// One search step (gradient plus Adam update) with and without
/// rematerialization for GGDM+TIME at `k`.
pub fn remat_step(model: &Arc<ScoreNetwork>, schedule: &NoiseSchedule, data: &Tensor, k: usize, n: usize) -> RematReport {
    let features = FeatureMap::random_fourier(data, 64, 4).unwrap();
    let idx: Vec<usize> = (0..n).collect();
    let real = features.apply(&ddss::diffusion::data::gather_rows(data, &idx)).unwrap();
    let p = init_from_ddpm(schedule, k, SamplerSpec::new(Family::Ggdm, true)).unwrap();
    let run = |remat: bool| {
        let e = evaluate_step(
            model,
            schedule,
            &features,
            KernelKind::Linear,
            &p,
            &real,
            &step_noise(1, 0),
            n,
            remat,
        )
        .unwrap();
        let mut q = p.clone();
        let mut adam = AdamState::for_tensors(AdamConfig::default(), &q.group_tensors());
        apply_update(&mut q, &mut adam, &e.grads).unwrap();
        (e, q)
    };
    let (ea, qa) = run(true);
    let (eb, qb) = run(false);
    let mut gap: f64 = 0.0;
    for ((_, a), (_, b)) in qa.groups().iter().zip(qb.groups()) {
        for (x, y) in a.iter().zip(b) {
            gap = gap.max((x - y).abs());
        }
    }
    RematReport {
        update_gap: gap,
        peak_interior_remat: ea.memory.peak_interior_bytes,
        peak_interior_plain: eb.memory.peak_interior_bytes,
        recomputations: ea.memory.recomputations,
    }
}
