use serde::{Deserialize, Serialize};

use super::params::{Gradients, ModelParams};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub m: Gradients,
    pub v: Gradients,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams) -> Self {
        OptimizerState { m: Gradients::zeros_like(params), v: Gradients::zeros_like(params), step: 0 }
    }
}

impl Adam {
    pub fn step(&self, params: &mut ModelParams, grads: &Gradients, state: &mut OptimizerState) -> Result<()> {
        if !grads.is_finite() {
            return Err(Error::Numeric("non-finite gradient".into()));
        }
        state.step += 1;
        let t = state.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let g = grads.tensors();
        let m = state.m.tensors_mut();
        let v = state.v.tensors_mut();
        for (((_, mut p), (_, g)), ((_, mut m), (_, mut v))) in params.tensors_mut().into_iter().zip(g).zip(m.into_iter().zip(v)) {
            ndarray::Zip::from(&mut p).and(&g).and(&mut m).and(&mut v).for_each(|p, &g, m, v| {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            });
        }
        Ok(())
    }
}
