//! Adam and the step-decay learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    pub base_lr: f64,
    /// Epochs at which the rate is multiplied by `factor`.
    pub milestones: Vec<usize>,
    pub factor: f64,
    pub epochs: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule { base_lr: 3.5e-4, milestones: vec![8, 18], factor: 0.1, epochs: 30 }
    }
}

impl Schedule {
    /// The 120-epoch recipe with decays at 30 and 70.
    pub fn paper_scale() -> Self {
        Schedule { base_lr: 3.5e-4, milestones: vec![30, 70], factor: 0.1, epochs: 120 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) || !(self.factor > 0.0) {
            return Err(Error::config("learning rate must be finite and non-negative, decay factor positive"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be positive"));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) || self.milestones.iter().any(|&m| m >= self.epochs) {
            return Err(Error::config(format!("milestones {:?} must be strictly increasing and below {} epochs", self.milestones, self.epochs)));
        }
        Ok(())
    }

    /// `base · factor^(milestones passed)`; a milestone counts as passed from
    /// its own epoch onward.
    pub fn lr(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.base_lr * self.factor.powi(passed as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay, applied to trainable weights.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// First and second moment estimates, aligned with the parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, params: &ParamStore<T>) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Adam { config, step: 0, m: zeros(), v: zeros() }
    }

    /// One update with gradients indexed like the store; `None` entries
    /// (unused or frozen parameters) are left untouched.
    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: f64) {
        self.step += 1;
        let c = &self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = T::lit(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::lit(1.0 - c.beta2.powi(self.step as i32));
        let (lr_t, eps, wd) = (T::lit(lr), T::lit(c.eps), T::lit(lr * c.weight_decay));
        for (i, p) in params.iter_mut().enumerate() {
            let Some(g) = grads.get(i).and_then(|g| g.as_ref()) else { continue };
            if !p.trainable {
                continue;
            }
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (k, w) in p.value.data_mut().iter_mut().enumerate() {
                let gk = g.data()[k];
                m[k] = b1 * m[k] + (T::one() - b1) * gk;
                v[k] = b2 * v[k] + (T::one() - b2) * gk * gk;
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                *w -= lr_t * mhat / (vhat.sqrt() + eps) + wd * *w;
            }
        }
    }
}
