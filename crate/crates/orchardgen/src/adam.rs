//! Adam with bias correction and decoupled weight decay.
//!
//! Decay multiplies parameters by `1 - lr * wd` before the moment-based
//! update, rather than folding decay into the gradient.

use crate::denoiser::DenoiserParams;
use crate::error::{Error, Result};

/// Optimizer hyperparameters. Defaults are the fine-tuning settings this
/// pipeline inherits: lr 2e-6, betas (0.9, 0.999), eps 1e-8, weight decay
/// 1e-2. Toy pretraining overrides the learning rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            lr: 2e-6,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

impl AdamHyper {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.weight_decay.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("bad optimizer settings {self:?}")))
        }
    }

    pub fn with_lr(self, lr: f64) -> Self {
        Self { lr, ..self }
    }
}

/// First/second moment accumulators (parameter-shaped) plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: DenoiserParams,
    v: DenoiserParams,
    step: u64,
    hyper: AdamHyper,
}

impl AdamState {
    pub fn new(params: &DenoiserParams, hyper: AdamHyper) -> Result<Self> {
        hyper.validate()?;
        Ok(Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
            hyper,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn hyper(&self) -> &AdamHyper {
        &self.hyper
    }
}

/// One optimizer step in place. Rejects non-finite gradients without touching
/// either the parameters or the state.
pub fn adam_step(
    params: &mut DenoiserParams,
    grads: &DenoiserParams,
    state: &mut AdamState,
) -> Result<()> {
    if params.config() != grads.config() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", params.config()),
            actual: format!("{:?}", grads.config()),
        });
    }
    for (name, g) in grads.named_tensors() {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(name.to_string()));
        }
    }
    state.step += 1;
    let h = state.hyper;
    let bc1 = 1.0 - h.beta1.powi(state.step as i32);
    let bc2 = 1.0 - h.beta2.powi(state.step as i32);
    let decay = 1.0 - h.lr * h.weight_decay;
    let mut p_tensors = params.named_tensors_mut();
    let g_tensors = grads.named_tensors();
    let mut m_tensors = state.m.named_tensors_mut();
    let mut v_tensors = state.v.named_tensors_mut();
    for idx in 0..p_tensors.len() {
        let p = &mut p_tensors[idx].1;
        let g = g_tensors[idx].1;
        let m = &mut m_tensors[idx].1;
        let v = &mut v_tensors[idx].1;
        for i in 0..p.len() {
            p[i] *= decay;
            m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g[i];
            v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= h.lr * m_hat / (v_hat.sqrt() + h.eps);
        }
    }
    Ok(())
}
