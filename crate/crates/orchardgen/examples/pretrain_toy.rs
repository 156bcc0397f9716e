//! Train the small conditioned denoiser on procedural orchard scenes and
//! watch the noise-prediction loss fall.
//!
//! Scenes are generated on the fly, pooled down to latent space by the fixed
//! codec, and fed to the training loop under the class prompt "a tree". The
//! expected loss of an untrained network is around E[eps^2] = 1; training
//! should pull the 50-step moving average well below that.
//!
//! Run with: cargo run --example pretrain_toy

use orchardgen::adam::AdamHyper;
use orchardgen::config::RunConfig;
use orchardgen::latent::LatentCodec;
use orchardgen::pipeline::pretrain_loop;
use orchardgen::rng;
use orchardgen::scene::{gen_scene, ColorClass};
use orchardgen::vocab::{embed_prompt, PromptVocabulary};
use orchardgen::Result;
use orchardgen::denoiser::DenoiserParams;

fn main() -> Result<()> {
    // The stock config carries the desk-scale defaults (32x32 scenes,
    // 16x16 latents, T=100); only the step count is reduced here.
    let config = RunConfig::default();
    let steps = 600;

    let mut rng = rng::from_seed(11);
    let codec = LatentCodec::new(config.latent_factor)?;
    let mut latents = Vec::new();
    for i in 0..32 {
        let color = if i % 2 == 0 { ColorClass::Red } else { ColorClass::Green };
        let (image, _boxes) = gen_scene(&config.scene_spec(color), &mut rng)?;
        latents.push(codec.encode(&image)?);
    }
    println!(
        "training on {} latents of shape {:?}",
        latents.len(),
        latents[0].shape()
    );

    let sched = config.schedule()?;
    let vocab = PromptVocabulary::standard(config.cond_dim, 99);
    let cond = embed_prompt(&["a", "tree"], &vocab)?;
    let params = DenoiserParams::init(config.denoiser_config(), &mut rng)?;
    println!("model: {} parameters", params.parameter_count());

    let hyper = AdamHyper::default().with_lr(config.pretrain_lr);
    let (params, losses) = pretrain_loop(
        params,
        &sched,
        &latents,
        &cond,
        steps,
        config.batch_size,
        hyper,
        &mut rng,
    )?;

    let window = 50;
    println!("\n{:>6} {:>12}", "step", "avg loss");
    for end in (window..=losses.len()).step_by(window) {
        let avg: f64 = losses[end - window..end].iter().sum::<f64>() / window as f64;
        println!("{end:>6} {avg:>12.4}");
    }
    let first: f64 = losses[..window].iter().sum::<f64>() / window as f64;
    let last: f64 = losses[losses.len() - window..].iter().sum::<f64>() / window as f64;
    println!(
        "\nmoving average fell from {first:.4} to {last:.4} ({:.0}% of start)",
        100.0 * last / first
    );
    assert!(params.is_finite());
    Ok(())
}
