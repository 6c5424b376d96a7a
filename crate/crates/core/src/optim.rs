//! AdamW with a linear warmup.

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParameterRegistry;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    /// Fraction of `total_steps` over which the rate ramps up from zero.
    pub warmup: f64,
    pub total_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 3e-3,
            warmup: 0.1,
            total_steps: 2000,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup) {
            return Err(Error::Config("warmup fraction must lie in [0, 1]".into()));
        }
        if self.total_steps == 0 {
            return Err(Error::Config("total steps must be positive".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        Ok(())
    }

    /// Learning rate at `step`: linear from 0 over the warmup steps, flat after.
    pub fn learning_rate_at(&self, step: usize) -> f64 {
        let warmup_steps = self.warmup * self.total_steps as f64;
        if warmup_steps <= 0.0 {
            return self.learning_rate;
        }
        self.learning_rate * (step as f64 / warmup_steps).min(1.0)
    }
}

/// Optimizer state: first and second moments per parameter.
#[derive(Debug, Clone)]
pub struct AdamW {
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    updates: i32,
}

impl AdamW {
    pub fn new(params: &ParameterRegistry) -> Self {
        let zeros = || {
            params
                .ids()
                .map(|id| Array2::zeros(params.value(id).raw_dim()))
                .collect::<Vec<_>>()
        };
        AdamW {
            m: zeros(),
            v: zeros(),
            updates: 0,
        }
    }

    /// Applies one update from the gradients accumulated in `params`.
    /// Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, params: &mut ParameterRegistry, config: &OptimizerConfig, step: usize) -> Result<()> {
        for id in params.ids() {
            if params.grad(id).iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of `{}`", params.name(id))));
            }
        }
        self.updates += 1;
        let lr = config.learning_rate_at(step);
        let bc1 = 1.0 - config.beta1.powi(self.updates);
        let bc2 = 1.0 - config.beta2.powi(self.updates);
        let (b1, b2, eps, wd) = (config.beta1, config.beta2, config.epsilon, config.weight_decay);

        for ((_, value, grad), (m, v)) in params
            .values_and_grads_mut()
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            Zip::from(value)
                .and(grad)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let update = (*m / bc1) / ((*v / bc2).sqrt() + eps);
                    *p -= lr * (update + wd * *p);
                });
        }
        Ok(())
    }
}
