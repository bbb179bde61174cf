//! Denoising pre-training of the score network.

use serde::{Deserialize, Serialize};

use super::data::gather_rows;
use super::{NoiseSchedule, ScoreNetwork};
use crate::error::{Error, Result};
use crate::rng::{self, normals};
use crate::search::adam::{AdamConfig, AdamState};
use crate::tensorgrad::{Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossWeighting {
    /// Unweighted `‖ε − ε̂‖²`.
    Simple,
    /// Each term multiplied by `max(1, SNR_t)`.
    Max1Snr,
}

impl LossWeighting {
    pub fn weight(self, schedule: &NoiseSchedule, t: usize) -> f64 {
        match self {
            LossWeighting::Simple => 1.0,
            LossWeighting::Max1Snr => schedule.snr(t).max(1.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub weighting: LossWeighting,
    pub ema_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 256,
            steps: 6000,
            weighting: LossWeighting::Simple,
            ema_decay: 0.9999,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && self.batch_size > 0
            && (0.0..1.0).contains(&self.ema_decay);
        if ok {
            Ok(())
        } else {
            Err(Error::Usage(format!("invalid training configuration {self:?}")))
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub network: ScoreNetwork,
    pub ema: ScoreNetwork,
    /// Minibatch loss before each update.
    pub losses: Vec<f64>,
}

/// One denoising minibatch: clean points, integer timesteps and the noise used.
#[derive(Clone, Debug)]
pub struct DenoisingBatch {
    pub x0: Tensor,
    pub timesteps: Vec<usize>,
    pub noise: Tensor,
}

impl DenoisingBatch {
    pub fn draw(dataset: &Tensor, schedule: &NoiseSchedule, batch: usize, seed: u64) -> Self {
        let mut r = rng::rng(seed);
        let idx: Vec<usize> = (0..batch).map(|_| rng::below(&mut r, dataset.rows())).collect();
        let timesteps = (0..batch).map(|_| 1 + rng::below(&mut r, schedule.len())).collect();
        let d = dataset.cols();
        let noise = Tensor::from_parts(vec![batch, d], normals(&mut r, batch * d));
        Self {
            x0: gather_rows(dataset, &idx),
            timesteps,
            noise,
        }
    }

    fn noisy(&self, schedule: &NoiseSchedule) -> Tensor {
        let d = self.x0.cols();
        let mut data = Vec::with_capacity(self.x0.numel());
        for (i, &t) in self.timesteps.iter().enumerate() {
            let a = schedule.alpha_bar(t);
            for j in 0..d {
                data.push(a.sqrt() * self.x0.row(i)[j] + (1.0 - a).sqrt() * self.noise.row(i)[j]);
            }
        }
        Tensor::from_parts(self.x0.shape().to_vec(), data)
    }
}

/// Mean over the batch of `w_t ‖ε − ε_θ(x_t, t)‖²`, built on `tape` with the
/// network weights registered by the caller.
fn loss_on_tape(
    tape: &mut Tape,
    network: &ScoreNetwork,
    params: &[crate::tensorgrad::Var],
    schedule: &NoiseSchedule,
    batch: &DenoisingBatch,
    weighting: LossWeighting,
) -> Result<crate::tensorgrad::Var> {
    let n = batch.timesteps.len();
    let xt = tape.constant(batch.noisy(schedule));
    let times = batch.timesteps.iter().map(|&t| t as f64).collect();
    let tv = tape.constant(Tensor::new(vec![n, 1], times)?);
    let eps_hat = network.forward(tape, params, xt, tv)?;
    let eps = tape.constant(batch.noise.clone());
    let diff = tape.sub(eps_hat, eps)?;
    let sq = tape.square(diff);
    let per_example = tape.sum_cols(sq)?;
    let weights: Vec<f64> = batch
        .timesteps
        .iter()
        .map(|&t| weighting.weight(schedule, t))
        .collect();
    let w = tape.constant(Tensor::vector(weights));
    let weighted = tape.mul(per_example, w)?;
    Ok(tape.mean(weighted))
}

/// Plain evaluation of the denoising loss on a fixed batch.
pub fn denoising_loss(
    network: &ScoreNetwork,
    schedule: &NoiseSchedule,
    batch: &DenoisingBatch,
    weighting: LossWeighting,
) -> Result<f64> {
    let mut tape = Tape::new();
    let params = network.constants(&mut tape);
    let l = loss_on_tape(&mut tape, network, &params, schedule, batch, weighting)?;
    Ok(tape.value(l).item())
}

/// Trains with Adam and keeps an exponential moving average of the weights.
pub fn train_ddpm(
    network: ScoreNetwork,
    schedule: &NoiseSchedule,
    dataset: &Tensor,
    config: &TrainConfig,
) -> Result<TrainOutput> {
    config.validate()?;
    if dataset.ndim() != 2 || dataset.rows() == 0 || dataset.cols() != network.config().data_dim {
        return Err(Error::Usage(format!(
            "dataset of shape {:?} does not match data dimension {}",
            dataset.shape(),
            network.config().data_dim
        )));
    }
    let net_config = network.config().clone();
    let mut weights = network.weights().to_vec();
    let mut ema: Vec<Vec<f64>> = weights.iter().map(Tensor::to_vec).collect();
    let adam_config = AdamConfig {
        learning_rate: config.learning_rate,
        ..AdamConfig::default()
    };
    let mut adam = AdamState::for_tensors(adam_config, &weights);
    let mut losses = Vec::with_capacity(config.steps);
    let mut seeds = rng::rng(config.seed);

    for step in 0..config.steps {
        let batch_seed = rand::RngCore::next_u64(&mut seeds);
        let batch = DenoisingBatch::draw(dataset, schedule, config.batch_size, batch_seed);
        let current = ScoreNetwork::from_weights(net_config.clone(), weights.clone())?;
        let mut tape = Tape::new();
        let params = current.leaves(&mut tape);
        let loss = loss_on_tape(&mut tape, &current, &params, schedule, &batch, config.weighting)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Divergence(format!(
                "training loss became {value} at step {step} (last finite loss {:?})",
                losses.last()
            )));
        }
        losses.push(value);
        let grads = tape.backward(loss)?;
        let grads: Vec<Tensor> = params
            .iter()
            .map(|&p| grads.get(p).cloned().expect("leaf gradient"))
            .collect();
        adam.step(&mut weights, &grads)?;

        let n = step as f64;
        let decay = config.ema_decay.min((1.0 + n) / (10.0 + n));
        for (e, w) in ema.iter_mut().zip(&weights) {
            for (ei, wi) in e.iter_mut().zip(w.data()) {
                *ei = decay * *ei + (1.0 - decay) * wi;
            }
        }
    }

    let ema_weights = ema
        .into_iter()
        .zip(&weights)
        .map(|(e, w)| Tensor::new(w.shape().to_vec(), e))
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainOutput {
        network: ScoreNetwork::from_weights(net_config.clone(), weights)?,
        ema: ScoreNetwork::from_weights(net_config, ema_weights)?,
        losses,
    })
}
