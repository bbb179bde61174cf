use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use crate::diffusion::data::{mixture_centers, MIXTURE_STD};
use crate::diffusion::{NoiseSchedule, ScoreNetwork};
use crate::error::{Error, Result};
use crate::ggdm::GgdmParams;
use crate::samplers::{sample_ddim, sample_ddpm_stride, sample_ggdm, stride_timesteps, DdimNoise, Draw, StrideKind};
use crate::search::{FeatureMap, KernelKind};
use crate::tensorgrad::Tensor;

use super::metrics::{kid_paired, mode_coverage, rbf_mmd, wasserstein2_2d};

pub const CSV_HEADER: &str = "sampler,K,seed,rbf_mmd,kid_val,wasserstein2,mode_coverage";

#[derive(Clone, Debug)]
pub enum EvalSampler {
    Ddpm { stride: StrideKind },
    Ddim { eta: f64, stride: StrideKind },
    /// Searched parameters; one entry per evaluated `K`.
    Searched { name: String, params: Vec<GgdmParams> },
}

impl EvalSampler {
    pub fn label(&self) -> String {
        match self {
            EvalSampler::Ddpm { .. } => "ddpm".into(),
            EvalSampler::Ddim { eta, .. } => format!("ddim_eta{eta}"),
            EvalSampler::Searched { name, .. } => name.clone(),
        }
    }

    fn sample(&self, ctx: &EvalContext, k: usize, draw: Draw) -> Result<Tensor> {
        let t = ctx.schedule.len();
        let batch = match self {
            EvalSampler::Ddpm { stride } => {
                sample_ddpm_stride(ctx.model, ctx.schedule, &stride_timesteps(t, k, *stride)?, draw)?
            }
            EvalSampler::Ddim { eta, stride } => sample_ddim(
                ctx.model,
                ctx.schedule,
                &stride_timesteps(t, k, *stride)?,
                &DdimNoise::Eta(*eta),
                draw,
            )?,
            EvalSampler::Searched { name, params } => {
                let p = params.iter().find(|p| p.k == k).ok_or_else(|| {
                    Error::Usage(format!("sampler '{name}' has no parameters for K={k}"))
                })?;
                sample_ggdm(ctx.model, p, ctx.schedule, draw)?
            }
        };
        Ok(batch.samples)
    }

    fn check(&self, schedule: &NoiseSchedule) -> Result<()> {
        if let EvalSampler::Searched { params, .. } = self {
            for p in params {
                p.check_schedule(schedule)?;
            }
        }
        Ok(())
    }
}

/// Model, schedule and held-out data shared by all cells of a report.
pub struct EvalContext<'a> {
    pub model: &'a Arc<ScoreNetwork>,
    pub schedule: &'a NoiseSchedule,
    /// Held-out real samples; the first `n_eval` rows are used.
    pub real: &'a Tensor,
    /// Feature map for the KID column.
    pub features: &'a FeatureMap,
}

#[derive(Clone, Debug)]
pub struct EvalSettings {
    pub ks: Vec<usize>,
    pub seeds: Vec<u64>,
    pub n_eval: usize,
    pub kernel: KernelKind,
    pub coverage_radius: f64,
    pub threads: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            ks: vec![5, 10, 20],
            seeds: vec![0, 1, 2, 3, 4],
            n_eval: 2048,
            kernel: KernelKind::Linear,
            coverage_radius: 3.0 * MIXTURE_STD,
            threads: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub sampler: String,
    pub k: usize,
    pub seed: u64,
    pub rbf_mmd: f64,
    pub kid_val: f64,
    pub wasserstein2: f64,
    pub mode_coverage: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    pub metadata: BTreeMap<String, String>,
}

impl MetricReport {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{CSV_HEADER}\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.sampler, r.k, r.seed, r.rbf_mmd, r.kid_val, r.wasserstein2, r.mode_coverage
            ));
        }
        s
    }

    pub fn rows_for<'a>(&'a self, sampler: &'a str, k: usize) -> impl Iterator<Item = &'a MetricRow> + 'a {
        self.rows.iter().filter(move |r| r.sampler == sampler && r.k == k)
    }

    /// Mean of `metric` over seeds for one sampler and `K`.
    pub fn mean(&self, sampler: &str, k: usize, metric: impl Fn(&MetricRow) -> f64) -> Option<f64> {
        let v: Vec<f64> = self.rows_for(sampler, k).map(metric).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

fn evaluate_cell(
    ctx: &EvalContext,
    settings: &EvalSettings,
    real: &Tensor,
    real_features: &Tensor,
    sampler: &EvalSampler,
    k: usize,
    seed: u64,
) -> Result<MetricRow> {
    let samples = sampler.sample(ctx, k, Draw::new(seed, settings.n_eval))?;
    if !samples.is_finite() {
        return Err(Error::Divergence(format!(
            "{} produced non-finite samples at K={k}, seed={seed}",
            sampler.label()
        )));
    }
    let fp = ctx.features.apply(&samples)?;
    Ok(MetricRow {
        sampler: sampler.label(),
        k,
        seed,
        rbf_mmd: rbf_mmd(&samples, real, None)?,
        kid_val: kid_paired(settings.kernel, &fp, real_features)?,
        wasserstein2: wasserstein2_2d(&samples, real)?,
        mode_coverage: mode_coverage(&samples, &mixture_centers(), settings.coverage_radius),
    })
}

/// Evaluates every sampler at every `K` and seed. All samplers share the
/// terminal and per-step noise of a given seed, so comparisons are paired.
/// Rows come out ordered by sampler, then `K`, then seed, regardless of the
/// number of worker threads.
pub fn build_report(ctx: &EvalContext, samplers: &[EvalSampler], settings: &EvalSettings) -> Result<MetricReport> {
    for s in samplers {
        s.check(ctx.schedule)?;
    }
    if ctx.real.rows() < settings.n_eval {
        return Err(Error::Usage(format!(
            "need {} held-out samples, have {}",
            settings.n_eval,
            ctx.real.rows()
        )));
    }
    let d = ctx.real.cols();
    let real = Tensor::new(vec![settings.n_eval, d], ctx.real.data()[..settings.n_eval * d].to_vec())?;
    let real_features = ctx.features.apply(&real)?;
    let cells: Vec<(usize, usize, u64)> = (0..samplers.len())
        .flat_map(|s| settings.ks.iter().flat_map(move |&k| settings.seeds.iter().map(move |&seed| (s, k, seed))))
        .collect();
    let results: Mutex<Vec<Option<Result<MetricRow>>>> = Mutex::new((0..cells.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let work = || loop {
        let i = next.fetch_add(1, Ordering::Relaxed);
        let Some(&(s, k, seed)) = cells.get(i) else { break };
        let row = evaluate_cell(ctx, settings, &real, &real_features, &samplers[s], k, seed);
        results.lock().expect("report worker panicked")[i] = Some(row);
    };
    let threads = settings.threads.clamp(1, cells.len().max(1));
    if threads == 1 {
        work();
    } else {
        std::thread::scope(|scope| {
            for _ in 0..threads {
                scope.spawn(work);
            }
        });
    }
    let rows = results
        .into_inner()
        .expect("report worker panicked")
        .into_iter()
        .map(|r| r.expect("every cell evaluated"))
        .collect::<Result<Vec<_>>>()?;
    let mut metadata = BTreeMap::new();
    metadata.insert("schedule_fingerprint".into(), ctx.schedule.fingerprint());
    metadata.insert("n_eval".into(), settings.n_eval.to_string());
    metadata.insert("kernel".into(), settings.kernel.label().into());
    Ok(MetricReport { rows, metadata })
}
