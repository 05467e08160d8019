use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::Tensor;

/// How weight decay enters the update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightDecay {
    /// `λ·θ` is added to the gradient before the moment updates.
    L2,
    /// `lr·λ·θ` is subtracted from the parameter after the Adam step.
    Decoupled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub decay_style: WeightDecay,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 2e-3,
            weight_decay: 1e-4,
            decay_style: WeightDecay::L2,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are allocated lazily on the first
/// step and must keep matching the parameter shapes afterwards.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.config.learning_rate = lr;
    }

    /// One update of `params` from the matching `grads`.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[&[T]]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::dim(
                "adam_step",
                format!("{} parameters, {} gradients", params.len(), grads.len()),
            ));
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
            self.second = self.first.clone();
        } else if self.first.len() != params.len() {
            return Err(Error::dim(
                "adam_step",
                format!("state for {} parameters, got {}", self.first.len(), params.len()),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.numel() != g.len() || self.first[i].len() != g.len() {
                return Err(Error::dim(
                    "adam_step",
                    format!(
                        "parameter {i}: {} values, gradient {}, moments {}",
                        p.numel(),
                        g.len(),
                        self.first[i].len()
                    ),
                ));
            }
        }

        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let lr = T::from_f64_lossy(c.learning_rate);
        let wd = T::from_f64_lossy(c.weight_decay);
        let b1 = T::from_f64_lossy(c.beta1);
        let b2 = T::from_f64_lossy(c.beta2);
        let eps = T::from_f64_lossy(c.epsilon);
        let bc1 = T::one() - b1.powi(t);
        let bc2 = T::one() - b2.powi(t);
        let decoupled = c.decay_style == WeightDecay::Decoupled;

        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            for (j, theta) in p.data_mut().iter_mut().enumerate() {
                let mut grad = g[j];
                if !decoupled {
                    grad += wd * *theta;
                }
                m[j] = b1 * m[j] + (T::one() - b1) * grad;
                v[j] = b2 * v[j] + (T::one() - b2) * grad * grad;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                let mut update = m_hat / (v_hat.sqrt() + eps);
                if decoupled {
                    update += wd * *theta;
                }
                *theta -= lr * update;
            }
        }
        Ok(())
    }
}
