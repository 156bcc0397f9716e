//! Gaussian diffusion: schedules, forward noising, closed-form marginals,
//! noise-prediction loss, and ancestral sampling.
//!
//! The forward process adds noise at rate `beta_t` per step,
//! `x_t = x_{t-1} * sqrt(1 - beta_t) + eps * sqrt(beta_t)`, driving any data
//! distribution toward a unit Gaussian. The reverse (sampling) step subtracts
//! a predicted noise and re-injects `sigma_t` noise, with `sigma_t^2 = beta_t`.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::ImageTensor;

/// Number of steps `T`, per-step rates, and the derived cumulative products.
///
/// Arrays are indexed by `t - 1` for `t` in `1..=T`; the accessors take `t`
/// directly and treat `t = 0` as the identity marginal (`alpha_bar(0) = 1`).
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    steps: usize,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

impl DiffusionSchedule {
    /// Linear schedule from `beta_start` to `beta_end` over `steps` steps.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if !(beta_start > 0.0 && beta_end < 1.0) {
            return Err(Error::invalid(format!(
                "beta bounds ({beta_start}, {beta_end}) outside (0, 1)"
            )));
        }
        if beta_start > beta_end {
            return Err(Error::invalid(format!(
                "beta_start {beta_start} exceeds beta_end {beta_end}"
            )));
        }
        let beta = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(beta)
    }

    /// Schedule from explicit per-step rates, each in `(0, 1)`.
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if beta.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::invalid("every beta must lie in (0, 1)"));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut prod = 1.0;
        for &a in &alpha {
            prod *= a;
            alpha_bar.push(prod);
        }
        let sigma = beta.iter().map(|b| b.sqrt()).collect();
        Ok(Self {
            steps: beta.len(),
            beta,
            alpha,
            alpha_bar,
            sigma,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps {
            return Err(Error::invalid(format!(
                "step {t} outside [1, {}]",
                self.steps
            )));
        }
        Ok(())
    }

    /// `beta_t` for `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        Ok(self.beta[t - 1])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        Ok(self.alpha[t - 1])
    }

    /// Cumulative product `alpha_bar_t`; `t = 0` returns the virtual 1.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        self.check_step(t)?;
        Ok(self.alpha_bar[t - 1])
    }

    pub fn sigma(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        Ok(self.sigma[t - 1])
    }
}

/// One forward step at an explicit rate:
/// `x_prev * sqrt(1 - beta) + noise * sqrt(beta)`.
///
/// Building block for [`forward_step`]; also usable at the `beta = 0` and
/// `beta = 1` boundaries that a valid schedule excludes.
pub fn forward_step_with_rate(
    x_prev: &ImageTensor,
    beta: f64,
    noise: &ImageTensor,
) -> Result<ImageTensor> {
    x_prev.scaled_sum((1.0 - beta).sqrt(), noise, beta.sqrt())
}

/// One forward step `q(x_t | x_{t-1})` with caller-provided standard noise.
pub fn forward_step(
    x_prev: &ImageTensor,
    t: usize,
    sched: &DiffusionSchedule,
    noise: &ImageTensor,
) -> Result<ImageTensor> {
    forward_step_with_rate(x_prev, sched.beta(t)?, noise)
}

/// Closed-form marginal `x_t = sqrt(alpha_bar_t) x_0 + sqrt(1 - alpha_bar_t) eps`,
/// distributed identically to `t` applications of [`forward_step`].
/// `t = 0` is the identity.
pub fn forward_marginal(
    x0: &ImageTensor,
    t: usize,
    sched: &DiffusionSchedule,
    noise: &ImageTensor,
) -> Result<ImageTensor> {
    let ab = sched.alpha_bar(t)?;
    x0.scaled_sum(ab.sqrt(), noise, (1.0 - ab).sqrt())
}

/// Full forward trajectory `[x_0, x_1, ..., x_T]` with fresh noise per step.
pub fn simulate_forward_chain(
    x0: &ImageTensor,
    sched: &DiffusionSchedule,
    rng: &mut Rng,
) -> Result<Vec<ImageTensor>> {
    let (c, h, w) = x0.shape();
    let mut chain = Vec::with_capacity(sched.steps() + 1);
    chain.push(x0.clone());
    for t in 1..=sched.steps() {
        let noise = ImageTensor::standard_normal(c, h, w, rng);
        let next = forward_step(chain.last().unwrap(), t, sched, &noise)?;
        chain.push(next);
    }
    Ok(chain)
}

/// Mean squared error between predicted and true noise. Mean over elements
/// keeps the loss scale independent of resolution.
pub fn ddpm_loss(eps_pred: &ImageTensor, eps_true: &ImageTensor) -> Result<f64> {
    eps_pred.require_same_shape(eps_true)?;
    let n = eps_pred.len() as f64;
    let sum: f64 = eps_pred
        .data()
        .iter()
        .zip(eps_true.data())
        .map(|(&p, &t)| (p - t) * (p - t))
        .sum();
    Ok(sum / n)
}

/// One reverse step:
/// `(x_t - (beta_t / sqrt(1 - alpha_bar_t)) eps_pred) / sqrt(alpha_t) + sigma_t * noise`.
///
/// `noise` must be provided for `t > 1`; at `t = 1` the step is deterministic
/// and any provided noise is ignored.
pub fn sample_step(
    x_t: &ImageTensor,
    t: usize,
    eps_pred: &ImageTensor,
    sched: &DiffusionSchedule,
    noise: Option<&ImageTensor>,
) -> Result<ImageTensor> {
    let beta = sched.beta(t)?;
    let alpha = sched.alpha(t)?;
    let ab = sched.alpha_bar(t)?;
    x_t.require_same_shape(eps_pred)?;
    let coeff = beta / (1.0 - ab).sqrt();
    let mean = x_t.scaled_sum(1.0, eps_pred, -coeff)?.map(|v| v / alpha.sqrt());
    if t > 1 {
        let noise = noise.ok_or_else(|| Error::invalid(format!("noise required at step {t}")))?;
        mean.scaled_sum(1.0, noise, sched.sigma(t)?)
    } else {
        Ok(mean)
    }
}

/// Ancestral sampling driven by an arbitrary noise predictor.
///
/// Draws `x_T ~ N(0, I)`, walks `t = T..1` through [`sample_step`], and
/// clamps the final state to `[-1, 1]` once at the end (never mid-chain).
pub fn sample_with<P>(
    mut predict: P,
    sched: &DiffusionSchedule,
    shape: (usize, usize, usize),
    rng: &mut Rng,
) -> Result<ImageTensor>
where
    P: FnMut(&ImageTensor, usize) -> Result<ImageTensor>,
{
    let (c, h, w) = shape;
    let mut x = ImageTensor::standard_normal(c, h, w, rng);
    for t in (1..=sched.steps()).rev() {
        let eps = predict(&x, t)?;
        let noise = if t > 1 {
            Some(ImageTensor::standard_normal(c, h, w, rng))
        } else {
            None
        };
        x = sample_step(&x, t, &eps, sched, noise.as_ref())?;
    }
    Ok(x.clamp(-1.0, 1.0))
}
