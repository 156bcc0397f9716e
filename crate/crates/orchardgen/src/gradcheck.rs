//! Finite-difference audit of the hand-derived gradients.
//!
//! Every scalar parameter is perturbed by ±h and the central difference is
//! compared against the analytic partial, for both the plain denoising loss
//! and the prior-preserving combined loss. The noise draws are pinned to a
//! base seed so the loss surface is identical across perturbations.

use crate::denoiser::{
    loss_and_grads_with_noise, loss_with_noise, BatchItem, DenoiserConfig, DenoiserParams,
};
use crate::diffusion::DiffusionSchedule;
use crate::dreambooth::{dreambooth_loss_with_noise, derive_item_step};
use crate::error::Result;
use crate::rng;
use crate::tensor::ImageTensor;
use crate::vocab::{embed_prompt, PromptVocabulary};
use std::fmt;

/// Relative-error floor: below this magnitude the comparison is effectively
/// absolute. At h = 1e-3 the central-difference truncation error is around
/// 1e-7, which would swamp a true relative comparison for near-zero partials.
const DENOMINATOR_FLOOR: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub seeds: u64,
    pub fd_step: f64,
    pub tolerance: f64,
    pub schedule_steps: usize,
    pub denoiser: DenoiserConfig,
    pub spatial: (usize, usize),
    pub lambda: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            seeds: 5,
            fd_step: 1e-3,
            tolerance: 1e-4,
            schedule_steps: 10,
            denoiser: DenoiserConfig {
                latent_channels: 1,
                features: 3,
                time_dim: 4,
                cond_dim: 4,
                residual: false,
            },
            spatial: (4, 4),
            lambda: 1.0,
        }
    }
}

/// Worst relative error observed across one parameter tensor.
#[derive(Debug, Clone)]
pub struct TensorCheck {
    pub tensor: &'static str,
    pub max_rel_err: f64,
}

/// One (loss path, seed) audit: per-tensor worst errors.
#[derive(Debug, Clone)]
pub struct PathCheck {
    pub path: &'static str,
    pub seed: u64,
    pub tensors: Vec<TensorCheck>,
}

impl PathCheck {
    pub fn max_rel_err(&self) -> f64 {
        self.tensors
            .iter()
            .map(|t| t.max_rel_err)
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checks: Vec<PathCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.checks
            .iter()
            .map(|c| c.max_rel_err())
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < self.tolerance
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for check in &self.checks {
            writeln!(f, "{} (seed {})", check.path, check.seed)?;
            for t in &check.tensors {
                writeln!(f, "  {:<18} max rel err {:.3e}", t.tensor, t.max_rel_err)?;
            }
        }
        write!(
            f,
            "overall max {:.3e} vs tolerance {:.1e}: {}",
            self.max_rel_err(),
            self.tolerance,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOMINATOR_FLOOR)
}

/// Compare analytic gradients against central differences of `loss_fn` for
/// every scalar parameter.
fn audit_tensors(
    params: &DenoiserParams,
    grads: &DenoiserParams,
    fd_step: f64,
    loss_fn: impl Fn(&DenoiserParams) -> Result<f64>,
) -> Result<Vec<TensorCheck>> {
    let names: Vec<&'static str> = grads.named_tensors().iter().map(|(n, _)| *n).collect();
    let mut out = Vec::with_capacity(names.len());
    for (tensor_idx, tensor_name) in names.iter().enumerate() {
        let len = grads.named_tensors()[tensor_idx].1.len();
        let mut worst = 0.0f64;
        for i in 0..len {
            let analytic = grads.named_tensors()[tensor_idx].1[i];
            let mut probe = params.clone();
            probe.named_tensors_mut()[tensor_idx].1[i] += fd_step;
            let plus = loss_fn(&probe)?;
            probe.named_tensors_mut()[tensor_idx].1[i] -= 2.0 * fd_step;
            let minus = loss_fn(&probe)?;
            let numeric = (plus - minus) / (2.0 * fd_step);
            worst = worst.max(relative_error(analytic, numeric));
        }
        out.push(TensorCheck {
            tensor: tensor_name,
            max_rel_err: worst,
        });
    }
    Ok(out)
}

/// Run the full audit: the plain denoising loss and the combined
/// prior-preserving loss, each over `config.seeds` random instantiations.
pub fn run_gradcheck(config: &GradCheckConfig) -> Result<GradCheckReport> {
    config.denoiser.validate()?;
    let sched = DiffusionSchedule::linear(config.schedule_steps, 0.01, 0.2)?;
    let (h, w) = config.spatial;
    let c = config.denoiser.latent_channels;
    let mut checks = Vec::new();
    for seed in 0..config.seeds {
        let mut r = rng::from_seed(0xABCD_0000 ^ seed);
        let params = DenoiserParams::init(config.denoiser, &mut r)?;
        let vocab = PromptVocabulary::standard(config.denoiser.cond_dim, 17 + seed);
        let cond_inst = embed_prompt(&["a", "sks", "tree"], &vocab)?;
        let cond_prior = embed_prompt(&["a", "tree"], &vocab)?;
        let z_inst = ImageTensor::standard_normal(c, h, w, &mut r);
        let z_prior = ImageTensor::standard_normal(c, h, w, &mut r);
        let base = rng::mix(seed ^ 0x5EED);

        // Plain denoising path.
        let t = derive_item_step(base, &z_inst, &cond_inst, sched.steps());
        let batch: [BatchItem<'_>; 1] = [(&z_inst, t, &cond_inst)];
        let (_, grads) = loss_and_grads_with_noise(&params, &sched, &batch, base)?;
        let tensors = audit_tensors(&params, &grads, config.fd_step, |p| {
            loss_with_noise(p, &sched, &batch, base)
        })?;
        checks.push(PathCheck {
            path: "denoising loss",
            seed,
            tensors,
        });

        // Combined prior-preserving path.
        let (_, grads) = dreambooth_loss_with_noise(
            &params,
            &sched,
            (&z_inst, &cond_inst),
            Some((&z_prior, &cond_prior)),
            config.lambda,
            base,
        )?;
        let tensors = audit_tensors(&params, &grads, config.fd_step, |p| {
            dreambooth_loss_with_noise(
                p,
                &sched,
                (&z_inst, &cond_inst),
                Some((&z_prior, &cond_prior)),
                config.lambda,
                base,
            )
            .map(|(l, _)| l)
        })?;
        checks.push(PathCheck {
            path: "prior-preserving loss",
            seed,
            tensors,
        });
    }
    Ok(GradCheckReport {
        checks,
        tolerance: config.tolerance,
    })
}
