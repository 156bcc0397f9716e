//! Stage orchestration behind the CLI.
//!
//! Every command is a pure function of (config, input artifacts, seed): it
//! reads inputs through the manifest formats, derives per-item random
//! streams so results are independent of worker count and generation order,
//! writes its artifacts under a conventional subdirectory of `out_dir`, and
//! leaves a `run-manifest.txt` (config echo plus SHA-256 digests of every
//! input read) sufficient to reproduce the run. Re-running any stage with
//! the same config and inputs reproduces its outputs byte for byte.
//!
//! Layout under `out_dir`:
//!
//! ```text
//! synth/          scene PNGs + annotation JSONs + synth.manifest
//! pretrain/       model.ckpt (+ .meta) + loss.txt
//! prior/          prior PNGs + prior.manifest       (or prior_green/ + prior_red/)
//! finetune_red/   model.ckpt + loss.txt             (likewise finetune_green/)
//! generated/      sampled PNGs + generated.manifest
//! annotated/      merged 3-channel PNGs (encode modes)
//! extracted/      centroid JSONs (extract mode)
//! filtered/       filtered.manifest + filter_report.json
//! detections/     detection JSONs
//! eval/           ap_report.json + ap_report.txt
//! gradcheck/      report.txt
//! ```

use crate::adam::{adam_step, AdamHyper, AdamState};
use crate::annotation::{
    encode_dots, encode_outlines, extract_dots, merge_annotation_channel,
    split_annotation_channel,
};
use crate::annotation_io::{
    read_annotation_json, write_annotation_json, AnnotationRecord,
};
use crate::bbox::BoundingBox;
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::curate::{filter_largest_cluster, FilterReport};
use crate::denoiser::{
    self, loss_and_grads_with_noise, BatchItem, DenoiserParams,
};
use crate::diffusion::DiffusionSchedule;
use crate::dreambooth::{
    derive_item_step, finetune, generate_prior_set, DreamBoothConfig, InstanceSet, PriorSet,
};
use crate::error::{Error, Result};
use crate::gradcheck::{run_gradcheck, GradCheckConfig, GradCheckReport};
use crate::imageops::{load_png, save_png, to_model_range, to_unit_range};
use crate::latent::LatentCodec;
use crate::manifest::{
    DatasetManifest, ManifestEntry, Provenance, Split,
};
use crate::metrics::{aggregate_runs, coco_ap, nms, APReport, Detection, GroundTruth};
use crate::rng::{self, Rng};
use crate::scene::{gen_scene, ColorClass};
use crate::tensor::ImageTensor;
use crate::vocab::{embed_prompt, ConditionVector, PromptVocabulary};
use rand::Rng as _;
use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

pub const RUN_MANIFEST: &str = "run-manifest.txt";

// ------------------------------------------------------------- plumbing

/// Independent generator for one named stage of one run.
fn stage_rng(seed: u64, stage: &str) -> Rng {
    rng::from_seed(rng::mix(seed ^ rng::fnv1a(stage.bytes())))
}

/// Seed for the run's shared prompt vocabulary (created once at pretrain,
/// carried in checkpoints afterwards).
fn vocab_seed(seed: u64) -> u64 {
    rng::mix(seed ^ rng::fnv1a("vocabulary".bytes()))
}

fn out_dir(config: &RunConfig) -> PathBuf {
    PathBuf::from(&config.out_dir)
}

/// Resolve a config path against `out_dir` unless it is absolute.
fn resolve(config: &RunConfig, rel: &str) -> PathBuf {
    let p = Path::new(rel);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        out_dir(config).join(p)
    }
}

fn stage_dir(config: &RunConfig, name: &str) -> Result<PathBuf> {
    let dir = out_dir(config).join(name);
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

/// Run `f` on a worker pool capped at `jobs` threads (0 = default pool).
fn with_pool<R: Send>(jobs: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    if jobs == 0 {
        Ok(f())
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::invalid(format!("cannot build worker pool: {e}")))?;
        Ok(pool.install(f))
    }
}

fn digest_file(path: &Path) -> Result<String> {
    let bytes = crate::error::at_path(std::fs::read(path), path)?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

/// `(display path, digest)` pairs for the run manifest, sorted by display
/// path. Paths under `out_dir` are shown relative to it.
fn digest_inputs(config: &RunConfig, inputs: &[PathBuf]) -> Result<Vec<(String, String)>> {
    let base = out_dir(config);
    let mut rows = Vec::with_capacity(inputs.len());
    for path in inputs {
        let display = path
            .strip_prefix(&base)
            .map(|p| p.display().to_string())
            .unwrap_or_else(|_| path.display().to_string());
        rows.push((display, digest_file(path)?));
    }
    rows.sort();
    rows.dedup();
    Ok(rows)
}

fn write_run_manifest(
    dir: &Path,
    command: &str,
    config: &RunConfig,
    inputs: &[(String, String)],
) -> Result<()> {
    let mut text = format!("command = {command}\n");
    if !inputs.is_empty() {
        text.push_str("\n# inputs: path sha256\n");
        for (path, digest) in inputs {
            text.push_str(&format!("{path} {digest}\n"));
        }
    }
    text.push_str("\n# configuration echo\n");
    text.push_str(&config.dump());
    std::fs::write(dir.join(RUN_MANIFEST), text)?;
    Ok(())
}

/// An entry's image path resolved against its manifest's directory.
fn entry_image_path(manifest_path: &Path, entry: &ManifestEntry) -> PathBuf {
    let p = Path::new(&entry.image);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest_path.parent().unwrap_or(Path::new(".")).join(p)
    }
}

fn entry_annotation_path(manifest_path: &Path, entry: &ManifestEntry) -> Option<PathBuf> {
    entry.annotation.as_ref().map(|a| {
        let p = Path::new(a);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            manifest_path.parent().unwrap_or(Path::new(".")).join(p)
        }
    })
}

/// Re-express `path` (already resolved) relative to a sibling stage dir:
/// `out/<other>/f` becomes `../<other>/f`. Paths outside `out_dir` stay
/// absolute.
fn rebase_into_stage(config: &RunConfig, path: &Path) -> String {
    let base = out_dir(config);
    let canon_base = base.canonicalize().unwrap_or(base);
    let canon = path.canonicalize().unwrap_or_else(|_| path.to_path_buf());
    match canon.strip_prefix(&canon_base) {
        Ok(rel) => format!("../{}", rel.display()),
        Err(_) => canon.display().to_string(),
    }
}

fn file_name_of(entry: &ManifestEntry) -> Result<String> {
    Path::new(&entry.image)
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .ok_or_else(|| Error::invalid(format!("entry image '{}' has no file name", entry.image)))
}

fn stem_of(name: &str) -> String {
    Path::new(name)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| name.to_string())
}

// ------------------------------------------------------------- synth

/// Generate `synth_count` procedural scenes with their box annotations and a
/// manifest. Returns the number of scenes written.
pub fn cmd_synth(config: &RunConfig) -> Result<usize> {
    config.validate()?;
    let stage = stage_dir(config, "synth")?;
    let mut rng = stage_rng(config.seed, "synth");
    let master = rng.next_u64();

    let scenes: Vec<Result<(ImageTensor, Vec<BoundingBox>)>> = with_pool(config.jobs, || {
        (0..config.synth_count)
            .into_par_iter()
            .map(|i| {
                let spec = config.scene_spec(config.synth_color.class_for(i));
                gen_scene(&spec, &mut rng::derive_stream(master, i as u64))
            })
            .collect()
    })?;

    let mut manifest = DatasetManifest::new(config.seed);
    for (i, scene) in scenes.into_iter().enumerate() {
        let (image, boxes) = scene?;
        let png = format!("scene_{i:04}.png");
        let json = format!("scene_{i:04}.json");
        save_png(&image, &stage.join(&png))?;
        let record =
            AnnotationRecord::from_boxes(&png, config.image_size, config.image_size, &boxes);
        write_annotation_json(&stage.join(&json), &record)?;
        manifest.entries.push(ManifestEntry {
            image: png,
            annotation: Some(json),
            split: Split::Train,
            color: Some(config.synth_color.class_for(i)),
            provenance: Provenance::Real,
        });
    }
    manifest.save(&stage.join("synth.manifest"))?;
    write_run_manifest(&stage, "synth", config, &[])?;
    Ok(config.synth_count)
}

// ------------------------------------------------------------- pretrain

/// Plain conditional training: per step, draw a batch (with replacement),
/// give each item a content-derived diffusion step, take one Adam step on
/// the noise-prediction loss. Returns final parameters and per-step losses.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_loop(
    mut params: DenoiserParams,
    sched: &DiffusionSchedule,
    latents: &[ImageTensor],
    cond: &ConditionVector,
    steps: usize,
    batch_size: usize,
    hyper: AdamHyper,
    rng: &mut Rng,
) -> Result<(DenoiserParams, Vec<f64>)> {
    if latents.is_empty() {
        return Err(Error::invalid("no training latents"));
    }
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let mut state = AdamState::new(&params, hyper)?;
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        let base = rng.next_u64();
        let picks: Vec<usize> = (0..batch_size)
            .map(|_| rng.gen_range(0..latents.len()))
            .collect();
        let batch: Vec<BatchItem<'_>> = picks
            .iter()
            .map(|&i| {
                let z = &latents[i];
                let t = derive_item_step(base, z, cond, sched.steps());
                (z, t, cond)
            })
            .collect();
        let (loss, grads) = loss_and_grads_with_noise(&params, sched, &batch, base)?;
        adam_step(&mut params, &grads, &mut state)?;
        losses.push(loss);
    }
    Ok((params, losses))
}

/// Load the non-held-out synth entries as encoded latents, recording every
/// file read into `inputs`.
fn load_training_latents(
    config: &RunConfig,
    manifest_path: &Path,
    inputs: &mut Vec<PathBuf>,
) -> Result<(DatasetManifest, Vec<ImageTensor>)> {
    let manifest = DatasetManifest::load(manifest_path)?;
    inputs.push(manifest_path.to_path_buf());
    let codec = LatentCodec::new(config.latent_factor)?;
    let mut latents = Vec::new();
    for entry in manifest.entries.iter().filter(|e| e.split == Split::Train) {
        let path = entry_image_path(manifest_path, entry);
        let image = load_png(&path)?;
        latents.push(codec.encode(&image)?);
        inputs.push(path);
    }
    Ok((manifest, latents))
}

fn write_loss_log(path: &Path, losses: &[f64]) -> Result<()> {
    let mut text = String::new();
    for l in losses {
        text.push_str(&format!("{l}\n"));
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Train the toy model on the synth set under the class prompt and write the
/// checkpoint. Returns the per-step loss history.
pub fn cmd_pretrain(config: &RunConfig) -> Result<Vec<f64>> {
    config.validate()?;
    let stage = stage_dir(config, "pretrain")?;
    let mut inputs = Vec::new();
    let manifest_path = resolve(config, &config.synth_manifest);
    let (_, latents) = load_training_latents(config, &manifest_path, &mut inputs)?;

    let schedule = config.schedule()?;
    let vocab = PromptVocabulary::standard(config.cond_dim, vocab_seed(config.seed));
    let prompt = config.dreambooth_config().prior_prompt();
    let cond = embed_prompt(&prompt, &vocab)?;

    let mut rng = stage_rng(config.seed, "pretrain");
    let params = DenoiserParams::init(config.denoiser_config(), &mut rng)?;
    let (params, losses) = pretrain_loop(
        params,
        &schedule,
        &latents,
        &cond,
        config.pretrain_steps,
        config.batch_size,
        config.adam_pretrain(),
        &mut rng,
    )?;

    let ckpt = Checkpoint {
        params,
        schedule,
        codec_factor: config.latent_factor,
        vocab,
        seed: config.seed,
        steps: losses.len() as u64,
    };
    ckpt.save(&stage.join("model.ckpt"), &config.dump())?;
    write_loss_log(&stage.join("loss.txt"), &losses)?;
    write_run_manifest(&stage, "pretrain", config, &digest_inputs(config, &inputs)?)?;
    Ok(losses)
}

// ------------------------------------------------------------- prior-gen

fn save_latents_as_images(
    config: &RunConfig,
    dir: &Path,
    prefix: &str,
    latents: &[ImageTensor],
    provenance: Provenance,
) -> Result<DatasetManifest> {
    let codec = LatentCodec::new(config.latent_factor)?;
    let mut manifest = DatasetManifest::new(config.seed);
    for (i, z) in latents.iter().enumerate() {
        let name = format!("{prefix}_{i:04}.png");
        save_png(&codec.decode(z), &dir.join(&name))?;
        manifest.entries.push(ManifestEntry {
            image: name,
            annotation: None,
            split: Split::Train,
            color: None,
            provenance,
        });
    }
    Ok(manifest)
}

/// Sample the class-prior image set(s) from the pretrained model. With
/// `share_priors` one set serves both subjects; otherwise each subject gets
/// an independent set.
pub fn cmd_prior_gen(config: &RunConfig) -> Result<usize> {
    config.validate()?;
    let ckpt_path = out_dir(config).join("pretrain/model.ckpt");
    let ckpt = Checkpoint::load(&ckpt_path)?;
    ckpt.ensure_image_compatible(3, config.image_size, config.image_size)?;
    ensure_codec_matches(config, &ckpt)?;
    let db = config.dreambooth_config();

    let dirs: Vec<String> = if config.share_priors {
        vec!["prior".into()]
    } else {
        vec!["prior_green".into(), "prior_red".into()]
    };
    let mut total = 0;
    for name in dirs {
        let dir = stage_dir(config, &name)?;
        let mut rng = stage_rng(config.seed, &name);
        let set = generate_prior_set(
            &ckpt.params,
            &ckpt.schedule,
            &ckpt.vocab,
            &db,
            latent_shape_of(config),
            &mut rng,
        )?;
        let manifest =
            save_latents_as_images(config, &dir, "prior", &set.latents, Provenance::Prior)?;
        manifest.save(&dir.join("prior.manifest"))?;
        write_run_manifest(
            &dir,
            "prior-gen",
            config,
            &digest_inputs(config, &[ckpt_path.clone()])?,
        )?;
        total += set.latents.len();
    }
    Ok(total)
}

fn latent_shape_of(config: &RunConfig) -> (usize, usize, usize) {
    config.latent_shape()
}

/// The checkpoint is authoritative for model-side settings; a config that
/// disagrees on the codec factor would silently decode at the wrong scale.
fn ensure_codec_matches(config: &RunConfig, ckpt: &Checkpoint) -> Result<()> {
    if ckpt.codec_factor != config.latent_factor {
        return Err(Error::Config(format!(
            "checkpoint was trained with codec factor {}, config asks for {}",
            ckpt.codec_factor, config.latent_factor
        )));
    }
    Ok(())
}

// ------------------------------------------------------------- finetune

fn load_prior_set(
    config: &RunConfig,
    db: &DreamBoothConfig,
    inputs: &mut Vec<PathBuf>,
) -> Result<PriorSet> {
    let dir_name = if config.share_priors {
        "prior".to_string()
    } else {
        format!("prior_{}", config.subject.tag())
    };
    let manifest_path = out_dir(config).join(&dir_name).join("prior.manifest");
    let manifest = DatasetManifest::load(&manifest_path)?;
    inputs.push(manifest_path.clone());
    let codec = LatentCodec::new(config.latent_factor)?;
    let mut latents = Vec::new();
    for entry in &manifest.entries {
        let path = entry_image_path(&manifest_path, entry);
        latents.push(codec.encode(&load_png(&path)?)?);
        inputs.push(path);
    }
    Ok(PriorSet {
        latents,
        prompt: db.prior_prompt(),
    })
}

/// Specialize the pretrained model on `config.subject`'s instance images
/// with prior preservation; writes `finetune_<subject>/model.ckpt`.
pub fn cmd_finetune(config: &RunConfig) -> Result<Vec<f64>> {
    config.validate()?;
    let tag = config.subject.tag();
    let stage = stage_dir(config, &format!("finetune_{tag}"))?;
    let mut inputs = Vec::new();

    let ckpt_path = out_dir(config).join("pretrain/model.ckpt");
    let ckpt = Checkpoint::load(&ckpt_path)?;
    ckpt.ensure_image_compatible(3, config.image_size, config.image_size)?;
    ensure_codec_matches(config, &ckpt)?;
    inputs.push(ckpt_path);

    // Instance images: the first `instance_count` training entries of the
    // subject's color.
    let manifest_path = resolve(config, &config.synth_manifest);
    let manifest = DatasetManifest::load(&manifest_path)?;
    inputs.push(manifest_path.clone());
    let codec = LatentCodec::new(config.latent_factor)?;
    let db = config.dreambooth_config();
    let mut instance_latents = Vec::new();
    for entry in manifest
        .entries
        .iter()
        .filter(|e| e.split == Split::Train && e.color == Some(config.subject))
        .take(config.instance_count)
    {
        let path = entry_image_path(&manifest_path, entry);
        instance_latents.push(codec.encode(&load_png(&path)?)?);
        inputs.push(path);
    }
    if instance_latents.len() < config.instance_count {
        return Err(Error::Config(format!(
            "need {} {tag} instance images, found {}",
            config.instance_count,
            instance_latents.len()
        )));
    }
    let instances = InstanceSet {
        latents: instance_latents,
        prompt: db.instance_prompt(),
    };
    let priors = load_prior_set(config, &db, &mut inputs)?;

    let mut rng = stage_rng(config.seed, &format!("finetune_{tag}"));
    let (params, losses) = finetune(
        ckpt.params.clone(),
        &ckpt.schedule,
        &ckpt.vocab,
        &instances,
        &priors,
        &db,
        config.adam_finetune(),
        &mut rng,
    )?;

    let tuned = Checkpoint {
        params,
        schedule: ckpt.schedule,
        codec_factor: ckpt.codec_factor,
        vocab: ckpt.vocab,
        seed: config.seed,
        steps: ckpt.steps + losses.len() as u64,
    };
    tuned.save(&stage.join("model.ckpt"), &config.dump())?;
    write_loss_log(&stage.join("loss.txt"), &losses)?;
    write_run_manifest(&stage, "finetune", config, &digest_inputs(config, &inputs)?)?;
    Ok(losses)
}

// ------------------------------------------------------------- generate

/// Sample the generated dataset: `generate_total` images split between the
/// two fine-tuned subjects by the configured ratio. Returns (green, red).
pub fn cmd_generate(config: &RunConfig) -> Result<(usize, usize)> {
    config.validate()?;
    let stage = stage_dir(config, "generated")?;
    let green_path = out_dir(config).join("finetune_green/model.ckpt");
    let red_path = out_dir(config).join("finetune_red/model.ckpt");
    let green = Checkpoint::load(&green_path)?;
    let red = Checkpoint::load(&red_path)?;
    green.ensure_compatible(&red)?;
    green.ensure_image_compatible(3, config.image_size, config.image_size)?;
    ensure_codec_matches(config, &green)?;

    let (n_green, n_red) =
        crate::manifest::balance_with_ratio(config.generate_total, config.ratio_green, config.ratio_red)?;
    let db = config.dreambooth_config();
    let prompt = db.instance_prompt();
    let cond_green = embed_prompt(&prompt, &green.vocab)?;
    let cond_red = embed_prompt(&prompt, &red.vocab)?;

    let mut rng = stage_rng(config.seed, "generate");
    let master = rng.next_u64();
    let codec = LatentCodec::new(config.latent_factor)?;
    let shape = config.latent_shape();

    struct Job {
        stream: u64,
        color: ColorClass,
        name: String,
    }
    let mut jobs = Vec::with_capacity(n_green + n_red);
    for i in 0..n_green {
        jobs.push(Job {
            stream: i as u64,
            color: ColorClass::Green,
            name: format!("gen_green_{i:04}.png"),
        });
    }
    for i in 0..n_red {
        jobs.push(Job {
            stream: (n_green + i) as u64,
            color: ColorClass::Red,
            name: format!("gen_red_{i:04}.png"),
        });
    }

    let images: Vec<Result<ImageTensor>> = with_pool(config.jobs, || {
        jobs.par_iter()
            .map(|job| {
                let (params, cond) = match job.color {
                    ColorClass::Green => (&green.params, &cond_green),
                    ColorClass::Red => (&red.params, &cond_red),
                };
                let mut stream = rng::derive_stream(master, job.stream);
                let z = denoiser::sample(params, &green.schedule, cond, shape, &mut stream)?;
                Ok(codec.decode(&z))
            })
            .collect()
    })?;

    let mut manifest = DatasetManifest::new(config.seed);
    for (job, image) in jobs.iter().zip(images) {
        save_png(&image?, &stage.join(&job.name))?;
        manifest.entries.push(ManifestEntry {
            image: job.name.clone(),
            annotation: None,
            split: Split::Train,
            color: Some(job.color),
            provenance: Provenance::Generated,
        });
    }
    manifest.save(&stage.join("generated.manifest"))?;
    write_run_manifest(
        &stage,
        "generate",
        config,
        &digest_inputs(config, &[green_path, red_path])?,
    )?;
    Ok((n_green, n_red))
}

// ------------------------------------------------------------- annotate

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnnotateMode {
    EncodeDots,
    EncodeOutlines,
    Extract,
}

impl AnnotateMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "encode-dots" => Ok(Self::EncodeDots),
            "encode-outlines" => Ok(Self::EncodeOutlines),
            "extract" => Ok(Self::Extract),
            other => Err(Error::Config(format!(
                "unknown annotate mode '{other}' (encode-dots | encode-outlines | extract)"
            ))),
        }
    }
}

/// One image's extracted dot centroids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CentroidRecord {
    pub image: String,
    pub width: usize,
    pub height: usize,
    pub points: Vec<CentroidPoint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CentroidPoint {
    pub x: f64,
    pub y: f64,
}

/// Encode modes burn box annotations into the third channel of each image
/// (writing `annotated/`); extract recovers dot centroids from the third
/// channel (writing `extracted/`). Returns the number of images processed.
pub fn cmd_annotate(config: &RunConfig, mode: AnnotateMode) -> Result<usize> {
    config.validate()?;
    let dot_config = config.dot_config();
    let mut inputs = Vec::new();
    let mut count = 0;

    match mode {
        AnnotateMode::EncodeDots | AnnotateMode::EncodeOutlines => {
            let stage = stage_dir(config, "annotated")?;
            let manifest_path = resolve(config, &config.annotate_encode_manifest);
            let manifest = DatasetManifest::load(&manifest_path)?;
            inputs.push(manifest_path.clone());
            for entry in &manifest.entries {
                let Some(ann_path) = entry_annotation_path(&manifest_path, entry) else {
                    continue;
                };
                let image_path = entry_image_path(&manifest_path, entry);
                let image = load_png(&image_path)?;
                let boxes = read_annotation_json(&ann_path)?.bounding_boxes()?;
                let (h, w) = (image.height(), image.width());
                let raster = match mode {
                    AnnotateMode::EncodeDots => encode_dots(&boxes, h, w, &dot_config)?,
                    _ => encode_outlines(&boxes, h, w, &dot_config)?,
                };
                let (color, _) = split_annotation_channel(&image)?;
                let merged = merge_annotation_channel(&color, &to_model_range(&raster))?;
                save_png(&merged, &stage.join(file_name_of(entry)?))?;
                inputs.push(image_path);
                inputs.push(ann_path);
                count += 1;
            }
            let cmd = if mode == AnnotateMode::EncodeDots {
                "annotate encode-dots"
            } else {
                "annotate encode-outlines"
            };
            write_run_manifest(&stage, cmd, config, &digest_inputs(config, &inputs)?)?;
        }
        AnnotateMode::Extract => {
            let stage = stage_dir(config, "extracted")?;
            let manifest_path = resolve(config, &config.annotate_extract_manifest);
            let manifest = DatasetManifest::load(&manifest_path)?;
            inputs.push(manifest_path.clone());
            for entry in &manifest.entries {
                let image_path = entry_image_path(&manifest_path, entry);
                let image = load_png(&image_path)?;
                let (_, annot) = split_annotation_channel(&image)?;
                let centroids = extract_dots(&to_unit_range(&annot), &dot_config)?;
                let name = file_name_of(entry)?;
                let record = CentroidRecord {
                    image: name.clone(),
                    width: image.width(),
                    height: image.height(),
                    points: centroids
                        .into_iter()
                        .map(|(x, y)| CentroidPoint { x, y })
                        .collect(),
                };
                let mut text = serde_json::to_string_pretty(&record)?;
                text.push('\n');
                std::fs::write(stage.join(format!("{}.json", stem_of(&name))), text)?;
                inputs.push(image_path);
                count += 1;
            }
            write_run_manifest(
                &stage,
                "annotate extract",
                config,
                &digest_inputs(config, &inputs)?,
            )?;
        }
    }
    Ok(count)
}

// ------------------------------------------------------------- filter

/// Run the curation filter over a manifest's images; keeps the largest
/// cluster. Writes `filtered/filtered.manifest` plus the cluster report.
pub fn cmd_filter(config: &RunConfig) -> Result<FilterReport> {
    config.validate()?;
    let stage = stage_dir(config, "filtered")?;
    let manifest_path = resolve(config, &config.filter_manifest);
    let manifest = DatasetManifest::load(&manifest_path)?;
    let mut inputs = vec![manifest_path.clone()];

    let mut images = Vec::with_capacity(manifest.entries.len());
    for entry in &manifest.entries {
        let path = entry_image_path(&manifest_path, entry);
        images.push(load_png(&path)?);
        inputs.push(path);
    }

    let mut rng = stage_rng(config.seed, "filter");
    let report = filter_largest_cluster(&images, &config.filter_config(), &mut rng)?;

    let mut kept = DatasetManifest::new(config.seed);
    for &idx in &report.kept {
        let entry = &manifest.entries[idx];
        kept.entries.push(ManifestEntry {
            image: rebase_into_stage(config, &entry_image_path(&manifest_path, entry)),
            annotation: entry_annotation_path(&manifest_path, entry)
                .map(|p| rebase_into_stage(config, &p)),
            ..entry.clone()
        });
    }
    kept.save(&stage.join("filtered.manifest"))?;
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    std::fs::write(stage.join("filter_report.json"), text)?;
    write_run_manifest(&stage, "filter", config, &digest_inputs(config, &inputs)?)?;
    Ok(report)
}

// ------------------------------------------------------------- detect

/// Run the blob detector over every color-tagged entry of a manifest,
/// writing one detection JSON per image. Returns the number of images.
pub fn cmd_detect(config: &RunConfig) -> Result<usize> {
    config.validate()?;
    let stage = stage_dir(config, "detections")?;
    let manifest_path = resolve(config, &config.detect_manifest);
    let manifest = DatasetManifest::load(&manifest_path)?;
    let mut inputs = vec![manifest_path.clone()];

    let entries: Vec<&ManifestEntry> = manifest
        .entries
        .iter()
        .filter(|e| e.color.is_some())
        .collect();
    let records: Vec<Result<(String, AnnotationRecord)>> = with_pool(config.jobs, || {
        entries
            .par_iter()
            .map(|entry| {
                let color = entry.color.expect("filtered to Some");
                let image_path = entry_image_path(&manifest_path, entry);
                let image = load_png(&image_path)?;
                let background = config.scene_spec(color).background;
                let detector = crate::detect::BlobDetectorConfig {
                    min_area: config.min_blob_area,
                    ..crate::detect::BlobDetectorConfig::for_class(color, &background)
                };
                let name = file_name_of(entry)?;
                let dets = detect_blobs(&image, &detector, &name)?;
                let dets = nms(&dets, config.nms_iou)?;
                let record = AnnotationRecord::from_detections(
                    &name,
                    image.width(),
                    image.height(),
                    &dets,
                );
                Ok((name, record))
            })
            .collect()
    })?;

    let mut count = 0;
    for (entry, record) in entries.iter().zip(records) {
        let (name, record) = record?;
        write_annotation_json(&stage.join(format!("{}.json", stem_of(&name))), &record)?;
        inputs.push(entry_image_path(&manifest_path, entry));
        count += 1;
    }
    write_run_manifest(&stage, "detect", config, &digest_inputs(config, &inputs)?)?;
    Ok(count)
}

use crate::detect::detect_blobs;

// ------------------------------------------------------------- eval

fn json_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().map(|e| e == "json").unwrap_or(false) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn load_ground_truth(
    dir: &Path,
    inputs: &mut Vec<PathBuf>,
) -> Result<(BTreeMap<String, Vec<GroundTruth>>, Vec<GroundTruth>)> {
    let mut by_image = BTreeMap::new();
    let mut all = Vec::new();
    for path in json_files(dir)? {
        let record = read_annotation_json(&path)?;
        let gts = record.ground_truths()?;
        all.extend(gts.clone());
        by_image.insert(record.image.clone(), gts);
        inputs.push(path);
    }
    if all.is_empty() && by_image.is_empty() {
        return Err(Error::invalid(format!(
            "no ground-truth records found in {}",
            dir.display()
        )));
    }
    Ok((by_image, all))
}

fn load_detections(
    dir: &Path,
    gt_images: &BTreeMap<String, Vec<GroundTruth>>,
    inputs: &mut Vec<PathBuf>,
) -> Result<Vec<Detection>> {
    let mut dets = Vec::new();
    let mut mismatches = Vec::new();
    for path in json_files(dir)? {
        let record = read_annotation_json(&path)?;
        if !gt_images.contains_key(&record.image) {
            mismatches.push(format!(
                "{}: image '{}' has no ground-truth record",
                path.display(),
                record.image
            ));
            continue;
        }
        dets.extend(record.detections()?);
        inputs.push(path);
    }
    if !mismatches.is_empty() {
        return Err(Error::invalid(format!(
            "detection/ground-truth id mismatches:\n{}",
            mismatches.join("\n")
        )));
    }
    Ok(dets)
}

/// Score detections against ground truth; multiple run subdirectories are
/// aggregated into one mean-and-std report.
pub fn cmd_eval(config: &RunConfig) -> Result<APReport> {
    config.validate()?;
    let stage = stage_dir(config, "eval")?;
    let det_dir = resolve(config, &config.eval_detections_dir);
    let gt_dir = resolve(config, &config.eval_ground_truth_dir);
    let mut inputs = Vec::new();

    let (gt_by_image, all_gts) = load_ground_truth(&gt_dir, &mut inputs)?;

    // A detections dir either holds JSON files directly (one run) or one
    // subdirectory per run.
    let mut run_dirs = Vec::new();
    for entry in std::fs::read_dir(&det_dir)? {
        let path = entry?.path();
        if path.is_dir() && !json_files(&path)?.is_empty() {
            run_dirs.push(path);
        }
    }
    run_dirs.sort();
    if run_dirs.is_empty() {
        run_dirs.push(det_dir.clone());
    }

    let mut reports = Vec::new();
    for dir in &run_dirs {
        let dets = load_detections(dir, &gt_by_image, &mut inputs)?;
        reports.push(coco_ap(&dets, &all_gts)?);
    }
    let report = if reports.len() == 1 {
        reports.pop().expect("one report")
    } else {
        aggregate_runs(&reports)?
    };

    let mut json = serde_json::to_string_pretty(&report)?;
    json.push('\n');
    std::fs::write(stage.join("ap_report.json"), json)?;
    std::fs::write(stage.join("ap_report.txt"), format!("{report}"))?;
    write_run_manifest(&stage, "eval", config, &digest_inputs(config, &inputs)?)?;
    Ok(report)
}

// ------------------------------------------------------------- gradcheck

/// Audit analytic gradients against finite differences; writes the report
/// and fails when any tensor exceeds the tolerance.
pub fn cmd_gradcheck(config: &RunConfig) -> Result<GradCheckReport> {
    config.validate()?;
    let stage = stage_dir(config, "gradcheck")?;
    let gc = GradCheckConfig {
        seeds: config.gradcheck_seeds,
        lambda: config.lambda,
        ..GradCheckConfig::default()
    };
    let report = run_gradcheck(&gc)?;
    std::fs::write(stage.join("report.txt"), format!("{report}"))?;
    write_run_manifest(&stage, "gradcheck", config, &[])?;
    if !report.passed() {
        return Err(Error::invalid(format!(
            "gradient check failed: max relative error {:.3e} exceeds {:.1e}",
            report.max_rel_err(),
            report.tolerance
        )));
    }
    Ok(report)
}
