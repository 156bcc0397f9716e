//! Subject-driven fine-tuning with class-specific prior preservation.
//!
//! A pretrained model is specialized to a handful of instance images bound to
//! a rare identifier token ("a sks tree"), while a second loss term on
//! model-generated class images ("a tree") pulls the class-generic behavior
//! back toward the pre-fine-tuning model. The prior weight `lambda` scales
//! that second term; `lambda = 0` degenerates to plain conditional training.

use crate::adam::{adam_step, AdamHyper, AdamState};
use crate::denoiser::{
    self, loss_and_grads_with_noise, loss_with_noise, BatchItem, DenoiserParams,
};
use crate::diffusion::DiffusionSchedule;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::ImageTensor;
use crate::vocab::{embed_prompt, ConditionVector, PromptVocabulary};
use rand::RngCore;

/// Fine-tuning settings. Prompts are always derived from `identifier` and
/// `class_noun` — "a sks tree" for instances, "a tree" for priors — so the
/// two can never drift apart.
#[derive(Debug, Clone, PartialEq)]
pub struct DreamBoothConfig {
    pub identifier: String,
    pub class_noun: String,
    pub lambda: f64,
    pub prior_count: usize,
    pub epochs: usize,
}

impl Default for DreamBoothConfig {
    fn default() -> Self {
        Self {
            identifier: "sks".to_string(),
            class_noun: "tree".to_string(),
            lambda: 1.0,
            prior_count: 200,
            epochs: 6,
        }
    }
}

impl DreamBoothConfig {
    pub fn validate(&self) -> Result<()> {
        if self.identifier.is_empty() || self.class_noun.is_empty() {
            return Err(Error::invalid("identifier and class noun must be non-empty"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid("lambda must be a finite non-negative real"));
        }
        if self.prior_count == 0 {
            return Err(Error::invalid("prior_count must be positive"));
        }
        Ok(())
    }

    /// `["a", identifier, class_noun]`
    pub fn instance_prompt(&self) -> Vec<String> {
        vec![
            "a".to_string(),
            self.identifier.clone(),
            self.class_noun.clone(),
        ]
    }

    /// `["a", class_noun]` — the identifier is omitted.
    pub fn prior_prompt(&self) -> Vec<String> {
        vec!["a".to_string(), self.class_noun.clone()]
    }
}

/// The few subject images, in latent space, with their shared prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceSet {
    pub latents: Vec<ImageTensor>,
    pub prompt: Vec<String>,
}

/// Model-generated class images, in latent space. Generated strictly before
/// fine-tuning starts (from a frozen parameter copy).
#[derive(Debug, Clone, PartialEq)]
pub struct PriorSet {
    pub latents: Vec<ImageTensor>,
    pub prompt: Vec<String>,
}

/// Derive the diffusion step for one training item from the per-call base
/// seed and the item's content. Content-keyed like the noise draw, so the
/// same item sees the same step regardless of its slot in the loss.
pub fn derive_item_step(
    base_seed: u64,
    latent: &ImageTensor,
    cond: &ConditionVector,
    steps: usize,
) -> usize {
    let key = denoiser::item_key(latent, 0, cond);
    1 + (rng::mix(base_seed ^ key) % steps as u64) as usize
}

/// Sample `prior_count` latents from the frozen pre-fine-tuning model under
/// the prior prompt. Each image uses its own derived stream, so the set is
/// independent of generation order.
pub fn generate_prior_set(
    params: &DenoiserParams,
    sched: &DiffusionSchedule,
    vocab: &PromptVocabulary,
    config: &DreamBoothConfig,
    latent_shape: (usize, usize, usize),
    rng: &mut Rng,
) -> Result<PriorSet> {
    config.validate()?;
    let prompt = config.prior_prompt();
    let cond = embed_prompt(&prompt, vocab)?;
    let master = rng.next_u64();
    let mut latents = Vec::with_capacity(config.prior_count);
    for i in 0..config.prior_count {
        let mut stream = rng::derive_stream(master, i as u64);
        latents.push(denoiser::sample(
            params,
            sched,
            &cond,
            latent_shape,
            &mut stream,
        )?);
    }
    Ok(PriorSet { latents, prompt })
}

/// The combined loss: instance noise-prediction error plus `lambda` times the
/// same error on a prior item, with independent content-derived `(t, eps)`
/// draws per item. Gradients are exact, like the underlying batch loss.
pub fn dreambooth_loss_with_noise(
    params: &DenoiserParams,
    sched: &DiffusionSchedule,
    instance: (&ImageTensor, &ConditionVector),
    prior: Option<(&ImageTensor, &ConditionVector)>,
    lambda: f64,
    base_seed: u64,
) -> Result<(f64, DenoiserParams)> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::invalid("lambda must be a finite non-negative real"));
    }
    let (z_s, cond_s) = instance;
    let t_s = derive_item_step(base_seed, z_s, cond_s, sched.steps());
    let batch: [BatchItem<'_>; 1] = [(z_s, t_s, cond_s)];
    let (mut loss, mut grads) = loss_and_grads_with_noise(params, sched, &batch, base_seed)?;
    if lambda > 0.0 {
        let (z_p, cond_p) =
            prior.ok_or_else(|| Error::invalid("lambda > 0 requires a prior item"))?;
        let t_p = derive_item_step(base_seed, z_p, cond_p, sched.steps());
        let prior_batch: [BatchItem<'_>; 1] = [(z_p, t_p, cond_p)];
        let (l_p, g_p) = loss_and_grads_with_noise(params, sched, &prior_batch, base_seed)?;
        loss += lambda * l_p;
        grads.add_scaled(&g_p, lambda)?;
    }
    Ok((loss, grads))
}

/// As above with the base seed drawn from `rng`. With `lambda = 0` and the
/// same generator state this is bit-identical to `loss_and_grads` on the
/// instance item alone.
pub fn dreambooth_loss(
    params: &DenoiserParams,
    sched: &DiffusionSchedule,
    instance: (&ImageTensor, &ConditionVector),
    prior: Option<(&ImageTensor, &ConditionVector)>,
    lambda: f64,
    rng: &mut Rng,
) -> Result<(f64, DenoiserParams)> {
    let base = rng.next_u64();
    dreambooth_loss_with_noise(params, sched, instance, prior, lambda, base)
}

/// Fine-tune on the instance set. Per epoch, every instance item takes one
/// optimizer step on the combined loss, paired with prior items round-robin.
/// Returns the updated parameters and the per-step loss history. The inputs
/// and the vocabulary are never mutated.
#[allow(clippy::too_many_arguments)]
pub fn finetune(
    mut params: DenoiserParams,
    sched: &DiffusionSchedule,
    vocab: &PromptVocabulary,
    instances: &InstanceSet,
    priors: &PriorSet,
    config: &DreamBoothConfig,
    hyper: AdamHyper,
    rng: &mut Rng,
) -> Result<(DenoiserParams, Vec<f64>)> {
    config.validate()?;
    if instances.latents.is_empty() {
        return Err(Error::invalid("instance set is empty"));
    }
    if config.lambda > 0.0 && priors.latents.is_empty() {
        return Err(Error::invalid("lambda > 0 requires a non-empty prior set"));
    }
    if instances.prompt != config.instance_prompt() {
        return Err(Error::invalid(format!(
            "instance set prompt {:?} disagrees with config prompt {:?}",
            instances.prompt,
            config.instance_prompt()
        )));
    }
    if config.lambda > 0.0 && priors.prompt != config.prior_prompt() {
        return Err(Error::invalid(format!(
            "prior set prompt {:?} disagrees with config prompt {:?}",
            priors.prompt,
            config.prior_prompt()
        )));
    }
    let cond_s = embed_prompt(&instances.prompt, vocab)?;
    let cond_p = embed_prompt(&config.prior_prompt(), vocab)?;
    let mut state = AdamState::new(&params, hyper)?;
    let mut losses = Vec::with_capacity(config.epochs * instances.latents.len());
    let mut prior_cursor = 0usize;
    for _epoch in 0..config.epochs {
        for latent in &instances.latents {
            let prior = if config.lambda > 0.0 {
                let p = &priors.latents[prior_cursor % priors.latents.len()];
                prior_cursor += 1;
                Some((p, &cond_p))
            } else {
                None
            };
            let (loss, grads) =
                dreambooth_loss(&params, sched, (latent, &cond_s), prior, config.lambda, rng)?;
            adam_step(&mut params, &grads, &mut state)?;
            losses.push(loss);
        }
    }
    Ok((params, losses))
}

/// Prior drift: the model's noise-prediction loss on a fixed probe set of
/// class-prior latents, with `(t, eps)` pinned by `probe_seed`. Comparing the
/// statistic across two fine-tuned models with the same seed measures how far
/// each drifted from class-generic behavior.
pub fn prior_drift(
    params: &DenoiserParams,
    sched: &DiffusionSchedule,
    probes: &[ImageTensor],
    cond_prior: &ConditionVector,
    probe_seed: u64,
) -> Result<f64> {
    if probes.is_empty() {
        return Err(Error::invalid("empty probe set"));
    }
    let batch: Vec<BatchItem<'_>> = probes
        .iter()
        .map(|z| {
            let t = derive_item_step(probe_seed, z, cond_prior, sched.steps());
            (z, t, cond_prior)
        })
        .collect();
    loss_with_noise(params, sched, &batch, probe_seed)
}
