use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::tensorgrad::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Bias-corrected Adam over a fixed list of tensors.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, shapes: &[&[usize]]) -> Self {
        let zeros = |s: &&[usize]| vec![0.0; s.iter().product()];
        Self {
            config,
            first: shapes.iter().map(zeros).collect(),
            second: shapes.iter().map(zeros).collect(),
            step: 0,
        }
    }

    pub fn for_tensors(config: AdamConfig, vars: &[Tensor]) -> Self {
        let shapes: Vec<&[usize]> = vars.iter().map(Tensor::shape).collect();
        Self::new(config, &shapes)
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update in place.
    pub fn step(&mut self, vars: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if vars.len() != self.first.len() || grads.len() != vars.len() {
            return Err(shape_err(
                "adam_step",
                format!(
                    "{} variables, {} gradients, {} moment slots",
                    vars.len(),
                    grads.len(),
                    self.first.len()
                ),
            ));
        }
        for (v, g) in vars.iter().zip(grads) {
            if v.shape() != g.shape() {
                return Err(shape_err(
                    "adam_step",
                    format!("variable {:?} vs gradient {:?}", v.shape(), g.shape()),
                ));
            }
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (k, (v, g)) in vars.iter_mut().zip(grads).enumerate() {
            let (m, s) = (&mut self.first[k], &mut self.second[k]);
            let mut x = v.to_vec();
            for i in 0..x.len() {
                let gi = g.data()[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                s[i] = c.beta2 * s[i] + (1.0 - c.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let shat = s[i] / bc2;
                x[i] -= c.learning_rate * mhat / (shat.sqrt() + c.epsilon);
            }
            *v = Tensor::new(v.shape().to_vec(), x)?;
        }
        Ok(())
    }
}
