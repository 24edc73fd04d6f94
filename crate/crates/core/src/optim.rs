use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        if !(0.0 <= self.beta1 && self.beta1 < self.beta2 && self.beta2 < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "need 0 ≤ beta1 < beta2 < 1, got {} and {}",
                self.beta1, self.beta2
            )));
        }
        Ok(())
    }
}

/// Adam with bias correction and a fixed learning rate.
pub struct Adam {
    cfg: OptimizerConfig,
    vars: Vec<Var>,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: u64,
}

impl Adam {
    pub fn new(vars: Vec<Var>, cfg: OptimizerConfig) -> Result<Self> {
        cfg.validate()?;
        let first = vars.iter().map(|v| v.zeros_like()).collect::<candle_core::Result<_>>()?;
        let second = vars.iter().map(|v| v.zeros_like()).collect::<candle_core::Result<_>>()?;
        Ok(Self {
            cfg,
            vars,
            first,
            second,
            step: 0,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update of every managed variable that has a gradient in `grads`.
    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let OptimizerConfig { learning_rate, beta1, beta2, eps } = self.cfg;
        let bias1 = 1.0 - beta1.powi(t);
        let bias2 = 1.0 - beta2.powi(t);
        for ((var, m), v) in self.vars.iter().zip(&mut self.first).zip(&mut self.second) {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            *m = ((&*m * beta1)? + (g * (1.0 - beta1))?)?;
            *v = ((&*v * beta2)? + (g.sqr()? * (1.0 - beta2))?)?;
            let m_hat = (&*m / bias1)?;
            let v_hat = (&*v / bias2)?;
            let update = (m_hat / (v_hat.sqrt()? + eps)?)?;
            var.set(&var.as_tensor().sub(&(update * learning_rate)?)?)?;
        }
        Ok(())
    }

    /// Moment estimates in variable order, for checkpointing.
    pub fn state(&self) -> (u64, &[Tensor], &[Tensor]) {
        (self.step, &self.first, &self.second)
    }

    pub fn restore(&mut self, step: u64, first: Vec<Tensor>, second: Vec<Tensor>) -> Result<()> {
        if first.len() != self.vars.len() || second.len() != self.vars.len() {
            return Err(Error::Checkpoint("optimizer state does not match variables".into()));
        }
        self.step = step;
        self.first = first;
        self.second = second;
        Ok(())
    }
}
