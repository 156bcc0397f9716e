//! Drive the whole dataset-generation chain through the library API:
//! synthesize scenes, pretrain, sample priors, fine-tune per subject,
//! generate, annotate, curate, detect, and score — all in one run.
//!
//! This is the programmatic equivalent of the CLI sequence
//!
//! ```text
//! orchardgen synth && orchardgen pretrain && orchardgen prior-gen &&
//! orchardgen --set subject=green finetune && orchardgen --set subject=red finetune &&
//! orchardgen generate && orchardgen annotate encode-dots &&
//! orchardgen annotate extract && orchardgen filter && orchardgen detect &&
//! orchardgen eval
//! ```
//!
//! with sizes cut down so it finishes in well under a minute. Artifacts
//! land in target/example-out/full_pipeline/.
//!
//! Run with: cargo run --example full_pipeline

use orchardgen::config::RunConfig;
use orchardgen::pipeline::{
    cmd_annotate, cmd_detect, cmd_eval, cmd_filter, cmd_finetune, cmd_generate,
    cmd_gradcheck, cmd_pretrain, cmd_prior_gen, cmd_synth, AnnotateMode,
};
use orchardgen::scene::ColorClass;
use orchardgen::Result;

fn main() -> Result<()> {
    let out = "target/example-out/full_pipeline";
    if std::path::Path::new(out).exists() {
        std::fs::remove_dir_all(out)?;
    }

    let mut config = RunConfig::default();
    config.out_dir = out.to_string();
    config.seed = 17;
    config.image_size = 16;
    config.schedule_steps = 30;
    config.features = 6;
    config.time_dim = 8;
    config.cond_dim = 8;
    config.synth_count = 12;
    config.pretrain_steps = 150;
    config.prior_count = 4;
    config.instance_count = 3;
    config.finetune_epochs = 2;
    config.generate_total = 8;
    config.pca_dims = 6;
    config.tsne_perplexity = 2.0;
    config.tsne_iters = 150;
    config.kmeans_k = 2;
    config.gradcheck_seeds = 1;
    config.validate()?;

    println!("[1/11] gradcheck");
    let gc = cmd_gradcheck(&config)?;
    println!("        max rel err {:.2e}", gc.max_rel_err());

    println!("[2/11] synth");
    let n = cmd_synth(&config)?;
    println!("        {n} scenes");

    println!("[3/11] pretrain ({} steps)", config.pretrain_steps);
    let losses = cmd_pretrain(&config)?;
    println!(
        "        loss {:.3} -> {:.3}",
        losses.first().unwrap(),
        losses.last().unwrap()
    );

    println!("[4/11] prior-gen");
    let n = cmd_prior_gen(&config)?;
    println!("        {n} prior images");

    for subject in [ColorClass::Green, ColorClass::Red] {
        println!("[5/11] finetune {}", subject.tag());
        let mut c = config.clone();
        c.subject = subject;
        let losses = cmd_finetune(&c)?;
        println!("        {} steps", losses.len());
    }

    println!("[6/11] generate");
    let (g, r) = cmd_generate(&config)?;
    println!("        {g} green + {r} red");

    println!("[7/11] annotate encode-dots (synth annotations into channels)");
    let n = cmd_annotate(&config, AnnotateMode::EncodeDots)?;
    println!("        {n} images");

    println!("[8/11] annotate extract (centroids out of generated images)");
    let n = cmd_annotate(&config, AnnotateMode::Extract)?;
    println!("        {n} images");

    println!("[9/11] filter (largest embedding cluster of the generated set)");
    let report = cmd_filter(&config)?;
    println!(
        "        kept {}/{} (clusters {:?})",
        report.kept.len(),
        report.labels.len(),
        report.cluster_sizes
    );

    println!("[10/11] detect (blob detector over the synth scenes)");
    let n = cmd_detect(&config)?;
    println!("        {n} images");

    println!("[11/11] eval");
    let ap = cmd_eval(&config)?;
    println!("        AP@0.50 = {:.3}, AP@[0.50:0.95] = {:.3}", ap.ap50, ap.ap_coco);

    println!("\nartifacts under {out}/ (one subdirectory per stage, each with a run-manifest.txt)");
    Ok(())
}
