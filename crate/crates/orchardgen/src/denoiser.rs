//! Conditioned noise predictor with exact reverse-mode gradients.
//!
//! The network is deliberately small — three 3x3 convolutions with additive
//! time and prompt injections between them:
//!
//! ```text
//! h1  = SiLU(conv_in(z_t) + time_proj(sinusoidal_embed(t)))   broadcast per map
//! h2  = SiLU(conv_mid(h1) + cond_proj(cond))                  broadcast per map
//! out = conv_out(h2)                                          (+ z_t if residual)
//! ```
//!
//! Every gradient is derived by hand for this fixed graph rather than by a
//! general autograd tape; `gradcheck` holds the machinery that audits them
//! against central finite differences.

use crate::diffusion::{self, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::ImageTensor;
use crate::vocab::ConditionVector;
use rand_distr::{Distribution, Normal};
use rand::RngCore;

/// Network dimensions. `residual` adds the input to the output and requires
/// `latent_channels == features`; it is off by default.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenoiserConfig {
    pub latent_channels: usize,
    pub features: usize,
    pub time_dim: usize,
    pub cond_dim: usize,
    pub residual: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            latent_channels: 3,
            features: 16,
            time_dim: 16,
            cond_dim: 16,
            residual: false,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_channels == 0
            || self.features == 0
            || self.time_dim == 0
            || self.cond_dim == 0
        {
            return Err(Error::invalid("denoiser dimensions must be positive"));
        }
        if self.time_dim % 2 != 0 {
            return Err(Error::invalid("time embedding dimension must be even"));
        }
        if self.residual && self.latent_channels != self.features {
            return Err(Error::invalid(
                "residual skip requires latent_channels == features",
            ));
        }
        Ok(())
    }
}

/// 3x3 same-padding convolution. Weight layout `[out][in][ky][kx]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    out_ch: usize,
    in_ch: usize,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

impl Conv2d {
    fn zeros(out_ch: usize, in_ch: usize) -> Self {
        Self {
            out_ch,
            in_ch,
            weight: vec![0.0; out_ch * in_ch * 9],
            bias: vec![0.0; out_ch],
        }
    }

    fn he_init(out_ch: usize, in_ch: usize, rng: &mut Rng) -> Self {
        let std = (2.0 / (9 * in_ch) as f64).sqrt();
        let dist = Normal::new(0.0, std).unwrap();
        Self {
            out_ch,
            in_ch,
            weight: (0..out_ch * in_ch * 9).map(|_| dist.sample(rng)).collect(),
            bias: vec![0.0; out_ch],
        }
    }

    #[inline]
    fn w(&self, o: usize, i: usize, ky: usize, kx: usize) -> f64 {
        self.weight[((o * self.in_ch + i) * 3 + ky) * 3 + kx]
    }

    fn forward(&self, input: &ImageTensor) -> ImageTensor {
        let (_, h, w) = input.shape();
        let mut out = ImageTensor::zeros(self.out_ch, h, w);
        for o in 0..self.out_ch {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = self.bias[o];
                    for i in 0..self.in_ch {
                        for ky in 0..3 {
                            let sy = y as isize + ky as isize - 1;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            for kx in 0..3 {
                                let sx = x as isize + kx as isize - 1;
                                if sx < 0 || sx >= w as isize {
                                    continue;
                                }
                                acc += self.w(o, i, ky, kx)
                                    * input.at(i, sy as usize, sx as usize);
                            }
                        }
                    }
                    out.set(o, y, x, acc);
                }
            }
        }
        out
    }

    /// Gradient with respect to the input (transposed convolution).
    fn input_grad(&self, dout: &ImageTensor) -> ImageTensor {
        let (_, h, w) = dout.shape();
        let mut din = ImageTensor::zeros(self.in_ch, h, w);
        for i in 0..self.in_ch {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for o in 0..self.out_ch {
                        for ky in 0..3 {
                            let oy = y as isize - (ky as isize - 1);
                            if oy < 0 || oy >= h as isize {
                                continue;
                            }
                            for kx in 0..3 {
                                let ox = x as isize - (kx as isize - 1);
                                if ox < 0 || ox >= w as isize {
                                    continue;
                                }
                                acc += self.w(o, i, ky, kx)
                                    * dout.at(o, oy as usize, ox as usize);
                            }
                        }
                    }
                    din.set(i, y, x, acc);
                }
            }
        }
        din
    }

    /// Accumulate weight and bias gradients into `grad`.
    fn accumulate_param_grads(&self, input: &ImageTensor, dout: &ImageTensor, grad: &mut Conv2d) {
        let (_, h, w) = input.shape();
        for o in 0..self.out_ch {
            let mut bias_sum = 0.0;
            for y in 0..h {
                for x in 0..w {
                    bias_sum += dout.at(o, y, x);
                }
            }
            grad.bias[o] += bias_sum;
            for i in 0..self.in_ch {
                for ky in 0..3 {
                    for kx in 0..3 {
                        let mut acc = 0.0;
                        for y in 0..h {
                            let sy = y as isize + ky as isize - 1;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            for x in 0..w {
                                let sx = x as isize + kx as isize - 1;
                                if sx < 0 || sx >= w as isize {
                                    continue;
                                }
                                acc += dout.at(o, y, x) * input.at(i, sy as usize, sx as usize);
                            }
                        }
                        grad.weight[((o * self.in_ch + i) * 3 + ky) * 3 + kx] += acc;
                    }
                }
            }
        }
    }
}

/// Bias-free dense map, weight layout `[out][in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    out_dim: usize,
    in_dim: usize,
    weight: Vec<f64>,
}

impl Dense {
    fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self {
            out_dim,
            in_dim,
            weight: vec![0.0; out_dim * in_dim],
        }
    }

    fn he_init(out_dim: usize, in_dim: usize, rng: &mut Rng) -> Self {
        let std = (2.0 / in_dim as f64).sqrt();
        let dist = Normal::new(0.0, std).unwrap();
        Self {
            out_dim,
            in_dim,
            weight: (0..out_dim * in_dim).map(|_| dist.sample(rng)).collect(),
        }
    }

    fn forward(&self, input: &[f64]) -> Vec<f64> {
        (0..self.out_dim)
            .map(|o| {
                let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
                row.iter().zip(input).map(|(w, x)| w * x).sum()
            })
            .collect()
    }

    /// `dvec[o]` is the gradient of the loss w.r.t. this map's output `o`.
    fn accumulate_param_grads(&self, input: &[f64], dvec: &[f64], grad: &mut Dense) {
        for o in 0..self.out_dim {
            for i in 0..self.in_dim {
                grad.weight[o * self.in_dim + i] += dvec[o] * input[i];
            }
        }
    }
}

/// All trainable parameters. The same struct doubles as a gradient container
/// (one partial per parameter, same shapes).
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    config: DenoiserConfig,
    conv_in: Conv2d,
    conv_mid: Conv2d,
    conv_out: Conv2d,
    time_proj: Dense,
    cond_proj: Dense,
}

impl DenoiserParams {
    /// He-initialized kernels (std `sqrt(2 / fan_in)`), zero biases.
    pub fn init(config: DenoiserConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            conv_in: Conv2d::he_init(config.features, config.latent_channels, rng),
            conv_mid: Conv2d::he_init(config.features, config.features, rng),
            conv_out: Conv2d::he_init(config.latent_channels, config.features, rng),
            time_proj: Dense::he_init(config.features, config.time_dim, rng),
            cond_proj: Dense::he_init(config.features, config.cond_dim, rng),
            config,
        })
    }

    pub fn zeros(config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            conv_in: Conv2d::zeros(config.features, config.latent_channels),
            conv_mid: Conv2d::zeros(config.features, config.features),
            conv_out: Conv2d::zeros(config.latent_channels, config.features),
            time_proj: Dense::zeros(config.features, config.time_dim),
            cond_proj: Dense::zeros(config.features, config.cond_dim),
            config,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.config).expect("existing config is valid")
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    /// Parameter tensors in a fixed order, named for checkpoints and reports.
    pub fn named_tensors(&self) -> Vec<(&'static str, &[f64])> {
        vec![
            ("conv_in.weight", self.conv_in.weight.as_slice()),
            ("conv_in.bias", self.conv_in.bias.as_slice()),
            ("conv_mid.weight", self.conv_mid.weight.as_slice()),
            ("conv_mid.bias", self.conv_mid.bias.as_slice()),
            ("conv_out.weight", self.conv_out.weight.as_slice()),
            ("conv_out.bias", self.conv_out.bias.as_slice()),
            ("time_proj.weight", self.time_proj.weight.as_slice()),
            ("cond_proj.weight", self.cond_proj.weight.as_slice()),
        ]
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(&'static str, &mut Vec<f64>)> {
        vec![
            ("conv_in.weight", &mut self.conv_in.weight),
            ("conv_in.bias", &mut self.conv_in.bias),
            ("conv_mid.weight", &mut self.conv_mid.weight),
            ("conv_mid.bias", &mut self.conv_mid.bias),
            ("conv_out.weight", &mut self.conv_out.weight),
            ("conv_out.bias", &mut self.conv_out.bias),
            ("time_proj.weight", &mut self.time_proj.weight),
            ("cond_proj.weight", &mut self.cond_proj.weight),
        ]
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// `self += scale * other`, tensor by tensor. Gradient accumulation for
    /// multi-term losses.
    pub fn add_scaled(&mut self, other: &Self, scale: f64) -> Result<()> {
        if self.config != other.config {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", self.config),
                actual: format!("{:?}", other.config),
            });
        }
        let others = other.named_tensors();
        for (idx, (_, t)) in self.named_tensors_mut().into_iter().enumerate() {
            for (a, b) in t.iter_mut().zip(others[idx].1) {
                *a += scale * b;
            }
        }
        Ok(())
    }

    pub fn max_abs_difference(&self, other: &Self) -> f64 {
        self.named_tensors()
            .iter()
            .zip(other.named_tensors())
            .flat_map(|((_, a), (_, b))| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }

    fn check_inputs(&self, z: &ImageTensor, cond: &ConditionVector) -> Result<()> {
        if z.channels() != self.config.latent_channels {
            return Err(Error::ShapeMismatch {
                expected: format!("{} channels", self.config.latent_channels),
                actual: format!("{} channels", z.channels()),
            });
        }
        if cond.dim() != self.config.cond_dim {
            return Err(Error::ShapeMismatch {
                expected: format!("condition dim {}", self.config.cond_dim),
                actual: format!("condition dim {}", cond.dim()),
            });
        }
        Ok(())
    }
}

/// Sinusoidal position encoding of a step index: `D/2` sines then `D/2`
/// cosines at geometric frequencies `10000^(-2i/D)`.
pub fn sinusoidal_embed(t: usize, time_dim: usize) -> Result<Vec<f64>> {
    if time_dim == 0 || time_dim % 2 != 0 {
        return Err(Error::invalid("time embedding dimension must be even"));
    }
    let half = time_dim / 2;
    let mut out = vec![0.0; time_dim];
    for i in 0..half {
        let freq = 10000f64.powf(-2.0 * i as f64 / time_dim as f64);
        let angle = t as f64 * freq;
        out[i] = angle.sin();
        out[half + i] = angle.cos();
    }
    Ok(out)
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

struct ForwardCache {
    t_embed: Vec<f64>,
    pre1: ImageTensor,
    h1: ImageTensor,
    pre2: ImageTensor,
    h2: ImageTensor,
}

fn forward_cached(
    params: &DenoiserParams,
    z: &ImageTensor,
    t: usize,
    cond: &ConditionVector,
) -> Result<(ImageTensor, ForwardCache)> {
    params.check_inputs(z, cond)?;
    let t_embed = sinusoidal_embed(t, params.config.time_dim)?;
    let tvec = params.time_proj.forward(&t_embed);
    let cvec = params.cond_proj.forward(cond.values());

    let mut pre1 = params.conv_in.forward(z);
    add_per_channel(&mut pre1, &tvec);
    let h1 = pre1.map(silu);

    let mut pre2 = params.conv_mid.forward(&h1);
    add_per_channel(&mut pre2, &cvec);
    let h2 = pre2.map(silu);

    let mut out = params.conv_out.forward(&h2);
    if params.config.residual {
        out = out.scaled_sum(1.0, z, 1.0)?;
    }
    let cache = ForwardCache {
        t_embed,
        pre1,
        h1,
        pre2,
        h2,
    };
    Ok((out, cache))
}

fn add_per_channel(x: &mut ImageTensor, per_map: &[f64]) {
    let (c, h, w) = x.shape();
    for ch in 0..c {
        let add = per_map[ch];
        for y in 0..h {
            for x_ in 0..w {
                let v = x.at(ch, y, x_);
                x.set(ch, y, x_, v + add);
            }
        }
    }
}

/// Sum a gradient map over its spatial extent, one scalar per channel — the
/// adjoint of a per-channel broadcast add.
fn per_channel_sums(x: &ImageTensor) -> Vec<f64> {
    let (c, h, w) = x.shape();
    (0..c)
        .map(|ch| {
            let mut s = 0.0;
            for y in 0..h {
                for x_ in 0..w {
                    s += x.at(ch, y, x_);
                }
            }
            s
        })
        .collect()
}

/// Predict the noise component of `z` at step `t` under prompt `cond`.
/// Pure: identical inputs give bitwise-identical outputs.
pub fn denoise_predict(
    params: &DenoiserParams,
    z: &ImageTensor,
    t: usize,
    cond: &ConditionVector,
) -> Result<ImageTensor> {
    forward_cached(params, z, t, cond).map(|(out, _)| out)
}

/// Backpropagate `dout` (gradient w.r.t. the prediction) through the network,
/// accumulating parameter gradients into `grads`.
fn backward(
    params: &DenoiserParams,
    z: &ImageTensor,
    cond: &ConditionVector,
    cache: &ForwardCache,
    dout: &ImageTensor,
    grads: &mut DenoiserParams,
) {
    // conv_out
    params
        .conv_out
        .accumulate_param_grads(&cache.h2, dout, &mut grads.conv_out);
    let dh2 = params.conv_out.input_grad(dout);

    // SiLU at stage 2
    let mut dpre2 = dh2;
    apply_silu_grad(&mut dpre2, &cache.pre2);

    // cond injection and conv_mid
    let dcvec = per_channel_sums(&dpre2);
    params
        .cond_proj
        .accumulate_param_grads(cond.values(), &dcvec, &mut grads.cond_proj);
    params
        .conv_mid
        .accumulate_param_grads(&cache.h1, &dpre2, &mut grads.conv_mid);
    let dh1 = params.conv_mid.input_grad(&dpre2);

    // SiLU at stage 1
    let mut dpre1 = dh1;
    apply_silu_grad(&mut dpre1, &cache.pre1);

    // time injection and conv_in
    let dtvec = per_channel_sums(&dpre1);
    params
        .time_proj
        .accumulate_param_grads(&cache.t_embed, &dtvec, &mut grads.time_proj);
    params
        .conv_in
        .accumulate_param_grads(z, &dpre1, &mut grads.conv_in);
}

fn apply_silu_grad(d: &mut ImageTensor, pre: &ImageTensor) {
    let pre_data = pre.data().to_vec();
    for (g, p) in d.data_mut().iter_mut().zip(pre_data) {
        *g *= silu_grad(p);
    }
}

/// One training item: a clean latent, a step index, and its prompt embedding.
pub type BatchItem<'a> = (&'a ImageTensor, usize, &'a ConditionVector);

/// Deterministic per-item key mixing the latent contents, the step, and the
/// condition; XORed with a per-call base seed to pick each item's noise
/// stream. Identical items therefore draw identical noise within one call,
/// which is what makes the mean-reduced batch loss reproducible and
/// duplication-invariant.
pub(crate) fn item_key(z0: &ImageTensor, t: usize, cond: &ConditionVector) -> u64 {
    let a = rng::hash_f64s(z0.data());
    let b = rng::hash_f64s(cond.values());
    rng::mix(a ^ b.rotate_left(23) ^ (t as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

pub(crate) fn noise_for_item(
    base_seed: u64,
    z0: &ImageTensor,
    t: usize,
    cond: &ConditionVector,
) -> ImageTensor {
    let (c, h, w) = z0.shape();
    let mut r = rng::from_seed(base_seed ^ item_key(z0, t, cond));
    ImageTensor::standard_normal(c, h, w, &mut r)
}

/// Batch noise-prediction loss and its exact parameter gradients, with the
/// noise streams pinned by `base_seed` (finite-difference checks re-evaluate
/// the same loss surface at perturbed parameters).
pub fn loss_and_grads_with_noise(
    params: &DenoiserParams,
    sched: &DiffusionSchedule,
    batch: &[BatchItem<'_>],
    base_seed: u64,
) -> Result<(f64, DenoiserParams)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let mut grads = params.zeros_like();
    let mut total = 0.0;
    let inv_batch = 1.0 / batch.len() as f64;
    for &(z0, t, cond) in batch {
        let eps = noise_for_item(base_seed, z0, t, cond);
        let z_t = diffusion::forward_marginal(z0, t, sched, &eps)?;
        let (pred, cache) = forward_cached(params, &z_t, t, cond)?;
        total += diffusion::ddpm_loss(&pred, &eps)? * inv_batch;
        let scale = 2.0 * inv_batch / pred.len() as f64;
        let dout = pred.scaled_sum(scale, &eps, -scale)?;
        backward(params, &z_t, cond, &cache, &dout, &mut grads);
    }
    Ok((total, grads))
}

/// Loss only — the finite-difference side of the gradient audit.
pub fn loss_with_noise(
    params: &DenoiserParams,
    sched: &DiffusionSchedule,
    batch: &[BatchItem<'_>],
    base_seed: u64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let mut total = 0.0;
    let inv_batch = 1.0 / batch.len() as f64;
    for &(z0, t, cond) in batch {
        let eps = noise_for_item(base_seed, z0, t, cond);
        let z_t = diffusion::forward_marginal(z0, t, sched, &eps)?;
        let pred = denoise_predict(params, &z_t, t, cond)?;
        total += diffusion::ddpm_loss(&pred, &eps)? * inv_batch;
    }
    Ok(total)
}

/// Batch loss with noise drawn from `rng` (one 64-bit base seed per call).
pub fn loss_and_grads(
    params: &DenoiserParams,
    sched: &DiffusionSchedule,
    batch: &[BatchItem<'_>],
    rng: &mut Rng,
) -> Result<(f64, DenoiserParams)> {
    let base = rng.next_u64();
    loss_and_grads_with_noise(params, sched, batch, base)
}

/// Ancestral sampling with this denoiser as the noise predictor.
pub fn sample(
    params: &DenoiserParams,
    sched: &DiffusionSchedule,
    cond: &ConditionVector,
    shape: (usize, usize, usize),
    rng: &mut Rng,
) -> Result<ImageTensor> {
    diffusion::sample_with(
        |x, t| denoise_predict(params, x, t, cond),
        sched,
        shape,
        rng,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::{embed_prompt, PromptVocabulary};

    fn test_config() -> DenoiserConfig {
        DenoiserConfig {
            latent_channels: 1,
            features: 2,
            time_dim: 4,
            cond_dim: 3,
            residual: false,
        }
    }

    fn test_cond(dim: usize) -> ConditionVector {
        let v = PromptVocabulary::standard(dim, 99);
        embed_prompt(&["a", "tree"], &v).unwrap()
    }

    #[test]
    fn embed_t0_is_zeros_and_ones() {
        let e = sinusoidal_embed(0, 6).unwrap();
        assert_eq!(&e[..3], &[0.0, 0.0, 0.0]);
        assert_eq!(&e[3..], &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn embed_base_frequency() {
        let e = sinusoidal_embed(1, 2).unwrap();
        assert_eq!(e, vec![1f64.sin(), 1f64.cos()]);
    }

    #[test]
    fn embed_rejects_odd_dim() {
        assert!(sinusoidal_embed(1, 3).is_err());
        assert!(sinusoidal_embed(1, 0).is_err());
    }

    #[test]
    fn embed_injective_over_schedule_range() {
        let mut keys: Vec<Vec<u64>> = (1..=10_000usize)
            .map(|t| {
                sinusoidal_embed(t, 16)
                    .unwrap()
                    .iter()
                    .map(|v| v.to_bits())
                    .collect()
            })
            .collect();
        keys.sort();
        keys.dedup();
        assert_eq!(keys.len(), 10_000);
    }

    #[test]
    fn config_validation() {
        assert!(test_config().validate().is_ok());
        let mut c = test_config();
        c.features = 0;
        assert!(c.validate().is_err());
        let mut c = test_config();
        c.time_dim = 5;
        assert!(c.validate().is_err());
        let mut c = test_config();
        c.residual = true;
        assert!(c.validate().is_err(), "residual needs matching dims");
        c.features = c.latent_channels;
        assert!(c.validate().is_ok());
    }

    #[test]
    fn init_is_seed_deterministic() {
        let c = test_config();
        let a = DenoiserParams::init(c, &mut rng::from_seed(5)).unwrap();
        let b = DenoiserParams::init(c, &mut rng::from_seed(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn init_kernel_std_matches_fan_in() {
        // Enough draws in one conv to measure the standard deviation: the
        // conv_in kernel of a (4 -> 2800)-channel layer has 100800 weights.
        let c = DenoiserConfig {
            latent_channels: 4,
            features: 2800,
            time_dim: 2,
            cond_dim: 2,
            residual: false,
        };
        let p = DenoiserParams::init(c, &mut rng::from_seed(12)).unwrap();
        let w = p
            .named_tensors()
            .into_iter()
            .find(|(n, _)| *n == "conv_in.weight")
            .unwrap()
            .1;
        assert!(w.len() >= 100_000);
        let mean: f64 = w.iter().sum::<f64>() / w.len() as f64;
        let var: f64 = w.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w.len() as f64;
        let target = (2.0 / 36.0f64).sqrt();
        assert!((var.sqrt() - target).abs() / target < 0.05);
    }

    #[test]
    fn biases_start_at_zero() {
        let p = DenoiserParams::init(test_config(), &mut rng::from_seed(5)).unwrap();
        for (name, t) in p.named_tensors() {
            if name.ends_with("bias") {
                assert!(t.iter().all(|&v| v == 0.0), "{name} not zero");
            }
        }
    }

    #[test]
    fn zero_params_predict_zero() {
        let p = DenoiserParams::zeros(test_config()).unwrap();
        let z = ImageTensor::constant(1, 4, 4, 0.7);
        let out = denoise_predict(&p, &z, 3, &test_cond(3)).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_shape_matches_input() {
        let p = DenoiserParams::init(test_config(), &mut rng::from_seed(1)).unwrap();
        for (h, w) in [(1, 1), (3, 3), (5, 7), (4, 4)] {
            let z = ImageTensor::constant(1, h, w, 0.1);
            let out = denoise_predict(&p, &z, 1, &test_cond(3)).unwrap();
            assert_eq!(out.shape(), (1, h, w));
        }
    }

    #[test]
    fn rejects_wrong_shapes() {
        let p = DenoiserParams::init(test_config(), &mut rng::from_seed(1)).unwrap();
        let z = ImageTensor::zeros(2, 4, 4);
        assert!(denoise_predict(&p, &z, 1, &test_cond(3)).is_err());
        let z = ImageTensor::zeros(1, 4, 4);
        assert!(denoise_predict(&p, &z, 1, &test_cond(5)).is_err());
    }

    #[test]
    fn predict_is_bitwise_deterministic() {
        let p = DenoiserParams::init(test_config(), &mut rng::from_seed(2)).unwrap();
        let z = ImageTensor::standard_normal(1, 4, 4, &mut rng::from_seed(3));
        let cond = test_cond(3);
        let a = denoise_predict(&p, &z, 7, &cond).unwrap();
        let b = denoise_predict(&p, &z, 7, &cond).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn scalar_forward_matches_hand_computation() {
        // 1x1 spatial input through 1-feature convs: only kernel centers
        // contribute, so the whole network is a scalar chain.
        let config = DenoiserConfig {
            latent_channels: 1,
            features: 1,
            time_dim: 2,
            cond_dim: 1,
            residual: false,
        };
        let mut p = DenoiserParams::zeros(config).unwrap();
        let center = 4; // [0][0][1][1] of a 1x1x3x3 kernel
        for (name, t) in p.named_tensors_mut() {
            match name {
                "conv_in.weight" => t[center] = 0.5,
                "conv_in.bias" => t[0] = 0.1,
                "conv_mid.weight" => t[center] = -0.8,
                "conv_mid.bias" => t[0] = 0.2,
                "conv_out.weight" => t[center] = 1.5,
                "conv_out.bias" => t[0] = -0.3,
                "time_proj.weight" => {
                    t[0] = 0.3;
                    t[1] = -0.4;
                }
                "cond_proj.weight" => t[0] = 0.7,
                _ => unreachable!(),
            }
        }
        let z = ImageTensor::from_vec(1, 1, 1, vec![0.9]).unwrap();
        let cond_values = 0.6;
        let cond = embed_prompt(
            &["x"],
            &PromptVocabulary::from_parts(vec!["x".into()], vec![false], 1, vec![cond_values])
                .unwrap(),
        )
        .unwrap();
        let t = 2;
        let e = sinusoidal_embed(t, 2).unwrap();
        let pre1 = 0.5 * 0.9 + 0.1 + (0.3 * e[0] - 0.4 * e[1]);
        let h1 = silu(pre1);
        let pre2 = -0.8 * h1 + 0.2 + 0.7 * cond_values;
        let h2 = silu(pre2);
        let expected = 1.5 * h2 - 0.3;
        let out = denoise_predict(&p, &z, t, &cond).unwrap();
        assert!((out.data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn residual_adds_input() {
        let config = DenoiserConfig {
            latent_channels: 2,
            features: 2,
            time_dim: 2,
            cond_dim: 2,
            residual: true,
        };
        let p = DenoiserParams::zeros(config).unwrap();
        let z = ImageTensor::constant(2, 3, 3, 0.4);
        let out = denoise_predict(&p, &z, 1, &test_cond(2)).unwrap();
        assert_eq!(out, z);
    }

    #[test]
    fn loss_rejects_empty_batch() {
        let p = DenoiserParams::zeros(test_config()).unwrap();
        let s = DiffusionSchedule::linear(10, 0.01, 0.1).unwrap();
        assert!(loss_and_grads(&p, &s, &[], &mut rng::from_seed(0)).is_err());
    }

    #[test]
    fn zero_params_loss_is_mean_square_noise() {
        let p = DenoiserParams::zeros(test_config()).unwrap();
        let s = DiffusionSchedule::linear(10, 0.01, 0.1).unwrap();
        let z0 = ImageTensor::standard_normal(1, 4, 4, &mut rng::from_seed(1));
        let cond = test_cond(3);
        let base = 777;
        let (loss, _) = loss_and_grads_with_noise(&p, &s, &[(&z0, 4, &cond)], base).unwrap();
        let eps = noise_for_item(base, &z0, 4, &cond);
        let expected = eps.data().iter().map(|v| v * v).sum::<f64>() / eps.len() as f64;
        assert!((loss - expected).abs() < 1e-15);
    }

    #[test]
    fn duplicated_item_keeps_loss_and_grads() {
        let p = DenoiserParams::init(test_config(), &mut rng::from_seed(6)).unwrap();
        let s = DiffusionSchedule::linear(10, 0.01, 0.1).unwrap();
        let z0 = ImageTensor::standard_normal(1, 4, 4, &mut rng::from_seed(2));
        let cond = test_cond(3);
        let single = loss_and_grads_with_noise(&p, &s, &[(&z0, 3, &cond)], 42).unwrap();
        let doubled =
            loss_and_grads_with_noise(&p, &s, &[(&z0, 3, &cond), (&z0, 3, &cond)], 42).unwrap();
        assert!((single.0 - doubled.0).abs() < 1e-15);
        assert!(single.1.max_abs_difference(&doubled.1) < 1e-12);
    }

    #[test]
    fn distinct_items_draw_distinct_noise() {
        let cond = test_cond(3);
        let a = ImageTensor::constant(1, 4, 4, 0.1);
        let b = ImageTensor::constant(1, 4, 4, 0.2);
        let na = noise_for_item(9, &a, 3, &cond);
        let nb = noise_for_item(9, &b, 3, &cond);
        let nt = noise_for_item(9, &a, 4, &cond);
        assert_ne!(na, nb);
        assert_ne!(na, nt);
    }

    #[test]
    fn gradients_match_finite_differences_spot_check() {
        // Small-scale preview of the dedicated gradient audit.
        let config = test_config();
        let s = DiffusionSchedule::linear(10, 0.01, 0.1).unwrap();
        let params = DenoiserParams::init(config, &mut rng::from_seed(31)).unwrap();
        let z0 = ImageTensor::standard_normal(1, 4, 4, &mut rng::from_seed(32));
        let cond = test_cond(3);
        let batch = [(&z0, 5usize, &cond)];
        let base = 1001;
        let (_, grads) = loss_and_grads_with_noise(&params, &s, &batch, base).unwrap();
        let h = 1e-3;
        let mut worst = 0.0f64;
        for idx in [0usize, 3, 7] {
            for tensor in 0..8 {
                let analytic = grads.named_tensors()[tensor].1;
                if analytic.len() <= idx {
                    continue;
                }
                let analytic = analytic[idx];
                let mut plus = params.clone();
                plus.named_tensors_mut()[tensor].1[idx] += h;
                let mut minus = params.clone();
                minus.named_tensors_mut()[tensor].1[idx] -= h;
                let lp = loss_with_noise(&plus, &s, &batch, base).unwrap();
                let lm = loss_with_noise(&minus, &s, &batch, base).unwrap();
                let numeric = (lp - lm) / (2.0 * h);
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-2);
                worst = worst.max(rel);
            }
        }
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn sample_is_deterministic_and_in_range() {
        let p = DenoiserParams::init(test_config(), &mut rng::from_seed(8)).unwrap();
        let s = DiffusionSchedule::linear(20, 0.001, 0.1).unwrap();
        let cond = test_cond(3);
        let a = sample(&p, &s, &cond, (1, 4, 4), &mut rng::from_seed(9)).unwrap();
        let b = sample(&p, &s, &cond, (1, 4, 4), &mut rng::from_seed(9)).unwrap();
        assert_eq!(a, b);
        assert!(a.max_abs() <= 1.0);
    }
}
