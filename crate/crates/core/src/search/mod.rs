//! Sampler search: feature maps, kernels, the unbiased KID objective and the
//! optimization loop that backpropagates through the unrolled sampler.

pub mod adam;
pub mod features;
pub mod kernel;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use adam::{AdamConfig, AdamState};
pub use features::{median_pairwise_distance, FeatureMap, FeatureSpec};
pub use kernel::{kernel_eval, kid_plain, kid_unbiased, KernelKind};

use crate::diffusion::data::{gather_rows, EpochSampler};
use crate::diffusion::{NoiseSchedule, ScoreNetwork};
use crate::error::{Error, Result};
use crate::ggdm::{init_from_ddpm, GgdmParams, SamplerSpec};
use crate::rng::NoiseStream;
use crate::samplers::{sample_ggdm, sample_ggdm_on_tape, Draw};
use crate::tensorgrad::{MemoryStats, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    pub sampler: SamplerSpec,
    #[serde(rename = "K")]
    pub k: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub kernel: KernelKind,
    pub features: FeatureSpec,
    pub adam: AdamConfig,
    /// Validation KID is computed every `val_every` steps (and at the ends).
    pub val_every: usize,
    pub val_size: usize,
    pub rematerialize: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            sampler: SamplerSpec::default(),
            k: 5,
            batch_size: 512,
            steps: 2000,
            seed: 0,
            kernel: KernelKind::Linear,
            features: FeatureSpec::default(),
            adam: AdamConfig::default(),
            val_every: 100,
            val_size: 2048,
            rematerialize: true,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Usage(format!(
                "batch_size must be at least 2 for the unbiased estimator, got {}",
                self.batch_size
            )));
        }
        if self.val_size < 2 || self.val_every == 0 || self.k == 0 {
            return Err(Error::Usage(
                "val_size must be >= 2, val_every and K must be positive".into(),
            ));
        }
        let a = &self.adam;
        if !(a.learning_rate > 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.epsilon > 0.0) {
            return Err(Error::Usage(format!("invalid Adam settings {a:?}")));
        }
        Ok(())
    }
}

/// Deterministic 64-bit mixing of a seed with stream labels.
pub fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b.wrapping_mul(0xd1b5_4a32_d192_ed03);
    for _ in 0..2 {
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
    }
    z
}

const STREAM_TRAIN_NOISE: u64 = 1;
const STREAM_REAL_BATCHES: u64 = 2;
const STREAM_VAL_NOISE: u64 = 3;

/// Noise used for the generated half of search step `step`.
pub fn step_noise(seed: u64, step: usize) -> NoiseStream {
    NoiseStream::split(
        mix_seed(seed, STREAM_TRAIN_NOISE, 2 * step as u64),
        mix_seed(seed, STREAM_TRAIN_NOISE, 2 * step as u64 + 1),
    )
}

/// Noise used for every validation sample set of a run.
pub fn validation_noise(seed: u64) -> NoiseStream {
    NoiseStream::new(mix_seed(seed, STREAM_VAL_NOISE, 0))
}

/// Loss value and gradients for one minibatch.
#[derive(Clone, Debug)]
pub struct StepEvaluation {
    pub loss: f64,
    /// One gradient per parameter group, in [`GgdmParams::groups`] order.
    pub grads: Vec<Tensor>,
    pub memory: MemoryStats,
}

/// KID between `n` generated samples (noise `noise`) and fixed real features,
/// differentiated with respect to every raw sampler variable.
pub fn evaluate_step(
    model: &Arc<ScoreNetwork>,
    schedule: &NoiseSchedule,
    features: &FeatureMap,
    kernel: KernelKind,
    params: &GgdmParams,
    real_features: &Tensor,
    noise: &NoiseStream,
    n: usize,
    rematerialize: bool,
) -> Result<StepEvaluation> {
    let mut tape = Tape::new();
    tape.set_rematerialize(rematerialize);
    let raw = params.register(&mut tape, true);
    let view = params.view(&mut tape, &raw, schedule)?;
    let chain = sample_ggdm_on_tape(&mut tape, model, &view, noise, 0, n)?;
    let fp = features.apply_on_tape(&mut tape, chain.samples)?;
    let loss = kid_unbiased(&mut tape, kernel, fp, real_features)?;
    let value = tape.value(loss).item();
    let g = tape.backward(loss)?;
    let grads = raw
        .vars()
        .into_iter()
        .map(|v| g.get(v).cloned().expect("registered leaf"))
        .collect();
    Ok(StepEvaluation {
        loss: value,
        grads,
        memory: tape.memory(),
    })
}

/// Applies one Adam update to the raw groups of `params`.
pub fn apply_update(params: &mut GgdmParams, adam: &mut AdamState, grads: &[Tensor]) -> Result<()> {
    let mut vars = params.group_tensors();
    adam.step(&mut vars, grads)?;
    params.set_group_tensors(&vars)
}

/// Validation KID of `params` on a fixed noise stream against fixed features.
pub fn validation_kid(
    model: &Arc<ScoreNetwork>,
    schedule: &NoiseSchedule,
    features: &FeatureMap,
    kernel: KernelKind,
    params: &GgdmParams,
    val_features: &Tensor,
    noise: NoiseStream,
) -> Result<f64> {
    let draw = Draw {
        noise,
        first: 0,
        n: val_features.rows(),
        keep_trajectory: false,
    };
    let batch = sample_ggdm(model, params, schedule, draw)?;
    kid_plain(kernel, &features.apply(&batch.samples)?, val_features)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub train_kid: f64,
    pub val_kid: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct SearchResult {
    pub init: GgdmParams,
    pub final_params: GgdmParams,
    pub best: GgdmParams,
    pub best_step: usize,
    pub best_val_kid: f64,
    pub trace: Vec<TraceRow>,
    /// Set when the run stopped on a non-finite loss or gradient; the final
    /// parameters are then the last finite ones.
    pub aborted: Option<String>,
}

impl SearchResult {
    pub fn initial_val_kid(&self) -> Option<f64> {
        self.trace.first().and_then(|r| r.val_kid)
    }

    pub fn final_val_kid(&self) -> Option<f64> {
        self.trace.last().and_then(|r| r.val_kid)
    }

    /// `step,train_kid,val_kid` with blank `val_kid` on rows without validation.
    pub fn trace_csv(&self) -> String {
        let mut s = String::from("step,train_kid,val_kid\n");
        for r in &self.trace {
            let v = r.val_kid.map(|v| format!("{v:e}")).unwrap_or_default();
            s.push_str(&format!("{},{:e},{}\n", r.step, r.train_kid, v));
        }
        s
    }
}

/// Real samples the search compares against.
#[derive(Clone, Copy, Debug)]
pub struct SearchData<'a> {
    pub train: &'a Tensor,
    pub val: &'a Tensor,
}

/// Optimizes sampler parameters for the frozen `model` by Adam on the unbiased
/// KID between generated and real minibatches.
pub fn ddss_search(
    model: &Arc<ScoreNetwork>,
    schedule: &NoiseSchedule,
    data: SearchData<'_>,
    features: &FeatureMap,
    config: &SearchConfig,
) -> Result<SearchResult> {
    config.validate()?;
    let init = init_from_ddpm(schedule, config.k, config.sampler)?;
    ddss_search_from(model, schedule, data, features, config, init)
}

/// [`ddss_search`] starting from given parameters.
pub fn ddss_search_from(
    model: &Arc<ScoreNetwork>,
    schedule: &NoiseSchedule,
    data: SearchData<'_>,
    features: &FeatureMap,
    config: &SearchConfig,
    init: GgdmParams,
) -> Result<SearchResult> {
    config.validate()?;
    init.check_schedule(schedule)?;
    if data.val.rows() < config.val_size || data.train.rows() < 2 {
        return Err(Error::Usage(format!(
            "need {} validation rows (have {}) and at least 2 training rows",
            config.val_size,
            data.val.rows()
        )));
    }
    let frozen = model.weight_hash();
    let val_real = gather_rows(data.val, &(0..config.val_size).collect::<Vec<_>>());
    let val_features = features.apply(&val_real)?;
    let val_noise = validation_noise(config.seed);
    let validate = |p: &GgdmParams| {
        validation_kid(model, schedule, features, config.kernel, p, &val_features, val_noise)
    };
    let mut batches = EpochSampler::new(
        data.train.rows(),
        mix_seed(config.seed, STREAM_REAL_BATCHES, 0),
    );

    let mut params = init.clone();
    let mut adam = AdamState::for_tensors(config.adam, &params.group_tensors());
    let mut trace = Vec::with_capacity(config.steps + 1);
    let mut best = init.clone();
    let mut best_step = 0;
    let mut best_val = f64::INFINITY;
    let mut aborted = None;

    for step in 0..=config.steps {
        let idx = batches.next_indices(config.batch_size);
        let real = features.apply(&gather_rows(data.train, &idx))?;
        let eval = evaluate_step(
            model,
            schedule,
            features,
            config.kernel,
            &params,
            &real,
            &step_noise(config.seed, step),
            config.batch_size,
            config.rematerialize,
        )?;
        let finite = eval.loss.is_finite() && eval.grads.iter().all(Tensor::is_finite);
        if !finite {
            aborted = Some(format!(
                "non-finite loss or gradient at step {step} (loss {}); keeping parameters from step {}",
                eval.loss,
                step.saturating_sub(1)
            ));
            break;
        }
        let val_kid = if step % config.val_every == 0 || step == config.steps {
            let v = validate(&params)?;
            if v < best_val {
                best_val = v;
                best = params.clone();
                best_step = step;
            }
            Some(v)
        } else {
            None
        };
        trace.push(TraceRow {
            step,
            train_kid: eval.loss,
            val_kid,
        });
        if step < config.steps {
            apply_update(&mut params, &mut adam, &eval.grads)?;
        }
    }

    if model.weight_hash() != frozen {
        return Err(Error::Invariant("score-network weights changed during search".into()));
    }
    Ok(SearchResult {
        init,
        final_params: params,
        best,
        best_step,
        best_val_kid: best_val,
        trace,
        aborted,
    })
}

#[cfg(test)]
mod tests;
