//! SGD and Adam on flat parameter vectors, plus the warmup learning-rate
//! schedule used for from-scratch pre-training.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::params::ParamVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptKind {
    Sgd,
    Adam,
}

/// Optimizer with per-parameter state for Adam (first/second moments with
/// bias correction).
#[derive(Debug, Clone)]
pub struct OptimizerState<F: Scalar> {
    pub kind: OptKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<F>,
    v: Vec<F>,
}

impl<F: Scalar> OptimizerState<F> {
    pub fn sgd(lr: f64) -> Self {
        OptimizerState {
            kind: OptKind::Sgd,
            lr,
            beta1: 0.0,
            beta2: 0.0,
            eps: 0.0,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn adam(lr: f64, n_params: usize) -> Self {
        OptimizerState {
            kind: OptKind::Adam,
            lr,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            step: 0,
            m: vec![F::zero(); n_params],
            v: vec![F::zero(); n_params],
        }
    }

    pub fn new(kind: OptKind, lr: f64, n_params: usize) -> Self {
        match kind {
            OptKind::Sgd => Self::sgd(lr),
            OptKind::Adam => Self::adam(lr, n_params),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradient buffer. Fails on non-finite
    /// gradients, naming the offending tensor.
    pub fn step(&mut self, params: &mut ParamVector<F>) -> Result<()> {
        if let Some(name) = params.non_finite_grad_tensor() {
            return Err(Error::NonFiniteGrad {
                tensor: name.to_owned(),
            });
        }
        self.step += 1;
        match self.kind {
            OptKind::Sgd => {
                let lr = F::from64(self.lr);
                let n = params.len();
                for i in 0..n {
                    let g = params.grad()[i];
                    params.data_mut()[i] -= lr * g;
                }
            }
            OptKind::Adam => {
                debug_assert_eq!(self.m.len(), params.len());
                let b1 = F::from64(self.beta1);
                let b2 = F::from64(self.beta2);
                let one = F::one();
                let lr = F::from64(self.lr);
                let eps = F::from64(self.eps);
                let corr1 = F::from64(1.0 - self.beta1.powi(self.step as i32));
                let corr2 = F::from64(1.0 - self.beta2.powi(self.step as i32));
                let n = params.len();
                for i in 0..n {
                    let g = params.grad()[i];
                    self.m[i] = b1 * self.m[i] + (one - b1) * g;
                    self.v[i] = b2 * self.v[i] + (one - b2) * g * g;
                    let m_hat = self.m[i] / corr1;
                    let v_hat = self.v[i] / corr2;
                    params.data_mut()[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}

/// Learning-rate schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LrSchedule {
    Constant { lr: f64 },
    /// `factor * d_model^-0.5 * min(step^-0.5, step * warmup^-1.5)`,
    /// 1-based steps.
    InverseSqrt { warmup: usize, factor: f64 },
}

impl LrSchedule {
    pub fn lr(&self, step: usize, d_model: usize) -> f64 {
        match *self {
            LrSchedule::Constant { lr } => lr,
            LrSchedule::InverseSqrt { warmup, factor } => {
                let s = step.max(1) as f64;
                let w = warmup.max(1) as f64;
                factor * (d_model as f64).powf(-0.5) * (s.powf(-0.5)).min(s * w.powf(-1.5))
            }
        }
    }
}

/// Rescales the gradient buffer to `max_norm` if its global norm exceeds it.
/// Returns `(norm_before, was_clipped)`.
pub fn clip_grad_norm<F: Scalar>(params: &mut ParamVector<F>, max_norm: f64) -> (f64, bool) {
    let norm = params.grad_norm();
    if norm > max_norm && norm > 0.0 {
        let scale = F::from64(max_norm / norm);
        for g in params.grad_mut() {
            *g *= scale;
        }
        (norm, true)
    } else {
        (norm, false)
    }
}
