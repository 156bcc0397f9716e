//! Run configuration: one flat key set covering every pipeline stage.
//!
//! The file format is line-oriented `key = value`, with `#` comments and
//! blank lines ignored. Absent keys take the defaults below; unknown or
//! duplicate keys are errors with line diagnostics. `dump` echoes every key
//! in a fixed order — the echo parses back to an identical config and is
//! what run manifests embed.

use crate::annotation::DotConfig;
use crate::curate::FilterConfig;
use crate::denoiser::DenoiserConfig;
use crate::diffusion::DiffusionSchedule;
use crate::dreambooth::DreamBoothConfig;
use crate::error::{Error, Result};
use crate::scene::{BackgroundSpec, ColorClass, SceneSpec};
use crate::adam::AdamHyper;
use std::collections::BTreeSet;
use std::path::Path;

/// Which disc color `synth` draws; `mixed` alternates red/green per scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthColor {
    Red,
    Green,
    Mixed,
}

impl SynthColor {
    /// Color of scene `index` under this setting.
    pub fn class_for(self, index: usize) -> ColorClass {
        match self {
            SynthColor::Red => ColorClass::Red,
            SynthColor::Green => ColorClass::Green,
            SynthColor::Mixed => {
                if index % 2 == 0 {
                    ColorClass::Red
                } else {
                    ColorClass::Green
                }
            }
        }
    }
}

trait ConfigValue: Sized {
    fn parse_cv(s: &str) -> Option<Self>;
    fn print_cv(&self) -> String;
}

impl ConfigValue for u64 {
    fn parse_cv(s: &str) -> Option<Self> {
        s.parse().ok()
    }
    fn print_cv(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for usize {
    fn parse_cv(s: &str) -> Option<Self> {
        s.parse().ok()
    }
    fn print_cv(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for f64 {
    fn parse_cv(s: &str) -> Option<Self> {
        s.parse().ok().filter(|v: &f64| v.is_finite())
    }
    fn print_cv(&self) -> String {
        // `Display` prints the shortest decimal that round-trips.
        format!("{self}")
    }
}

impl ConfigValue for bool {
    fn parse_cv(s: &str) -> Option<Self> {
        match s {
            "true" => Some(true),
            "false" => Some(false),
            _ => None,
        }
    }
    fn print_cv(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for String {
    fn parse_cv(s: &str) -> Option<Self> {
        Some(s.to_string())
    }
    fn print_cv(&self) -> String {
        self.clone()
    }
}

impl ConfigValue for ColorClass {
    fn parse_cv(s: &str) -> Option<Self> {
        ColorClass::parse(s).ok()
    }
    fn print_cv(&self) -> String {
        self.tag().to_string()
    }
}

impl ConfigValue for SynthColor {
    fn parse_cv(s: &str) -> Option<Self> {
        match s {
            "red" => Some(SynthColor::Red),
            "green" => Some(SynthColor::Green),
            "mixed" => Some(SynthColor::Mixed),
            _ => None,
        }
    }
    fn print_cv(&self) -> String {
        match self {
            SynthColor::Red => "red",
            SynthColor::Green => "green",
            SynthColor::Mixed => "mixed",
        }
        .to_string()
    }
}

fn parse_value<T: ConfigValue>(key: &str, value: &str) -> Result<T> {
    T::parse_cv(value).ok_or_else(|| {
        Error::Config(format!(
            "key '{key}': cannot parse '{value}' as {}",
            std::any::type_name::<T>()
        ))
    })
}

macro_rules! config_keys {
    ($(($field:ident, $ty:ty)),+ $(,)?) => {
        impl RunConfig {
            /// Set one key from its text value. The key set is exactly the
            /// field set; anything else is rejected.
            pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $(stringify!($field) => {
                        self.$field = parse_value::<$ty>(key, value)?;
                        Ok(())
                    })+
                    _ => Err(Error::Config(format!("unknown key '{key}'"))),
                }
            }

            /// Every key in declaration order, `key = value` per line.
            pub fn dump(&self) -> String {
                let mut out = String::new();
                $(
                    out.push_str(stringify!($field));
                    out.push_str(" = ");
                    out.push_str(&self.$field.print_cv());
                    out.push('\n');
                )+
                out
            }
        }
    };
}

/// Every knob of the pipeline. See `Default` for the desk-scale values.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: String,
    /// Worker cap for per-image parallel stages; 0 = one per core.
    pub jobs: usize,

    // Geometry.
    pub image_size: usize,
    pub latent_factor: usize,

    // Noise schedule.
    pub schedule_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,

    // Denoiser dims.
    pub features: usize,
    pub time_dim: usize,
    pub cond_dim: usize,
    pub residual: bool,

    // Pretraining.
    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,

    // Fine-tuning.
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
    pub lambda: f64,
    pub prior_count: usize,
    pub instance_count: usize,
    /// One prior set serves both subjects when true.
    pub share_priors: bool,
    pub identifier: String,
    pub class_noun: String,
    /// Which subject a `finetune` invocation specializes on.
    pub subject: ColorClass,

    // Scene synthesis.
    pub synth_count: usize,
    pub synth_color: SynthColor,
    pub apple_count_min: usize,
    pub apple_count_max: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    pub occlusion_prob: f64,
    pub background_noise: f64,

    // Generation.
    pub generate_total: usize,
    pub ratio_green: u64,
    pub ratio_red: u64,

    // Annotation channel.
    pub dot_side: usize,
    pub dot_intensity: f64,
    pub extraction_threshold: f64,

    // Curation filter.
    pub pca_dims: usize,
    pub tsne_perplexity: f64,
    pub tsne_iters: usize,
    pub kmeans_k: usize,
    pub kmeans_restarts: usize,

    // Detection and evaluation.
    pub nms_iou: f64,
    pub min_blob_area: usize,

    // Gradient audit.
    pub gradcheck_seeds: u64,

    // Stage wiring: paths relative to `out_dir` unless absolute.
    pub synth_manifest: String,
    pub annotate_encode_manifest: String,
    pub annotate_extract_manifest: String,
    pub filter_manifest: String,
    pub detect_manifest: String,
    pub eval_detections_dir: String,
    pub eval_ground_truth_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            out_dir: "out".into(),
            jobs: 0,
            image_size: 32,
            latent_factor: 2,
            schedule_steps: 100,
            beta_start: 1e-3,
            beta_end: 0.1,
            features: 16,
            time_dim: 16,
            cond_dim: 16,
            residual: false,
            pretrain_steps: 2000,
            pretrain_lr: 2e-3,
            batch_size: 8,
            weight_decay: 1e-2,
            finetune_epochs: 6,
            finetune_lr: 1e-3,
            lambda: 1.0,
            prior_count: 40,
            instance_count: 10,
            share_priors: true,
            identifier: "sks".into(),
            class_noun: "tree".into(),
            subject: ColorClass::Red,
            synth_count: 64,
            synth_color: SynthColor::Mixed,
            apple_count_min: 1,
            apple_count_max: 3,
            radius_min: 2.0,
            radius_max: 3.5,
            occlusion_prob: 0.0,
            background_noise: 0.1,
            generate_total: 16,
            ratio_green: 54,
            ratio_red: 482,
            dot_side: 5,
            dot_intensity: 1.0,
            extraction_threshold: 0.5,
            pca_dims: 50,
            tsne_perplexity: 30.0,
            tsne_iters: 1000,
            kmeans_k: 3,
            kmeans_restarts: 8,
            nms_iou: 0.45,
            min_blob_area: 3,
            gradcheck_seeds: 5,
            synth_manifest: "synth/synth.manifest".into(),
            annotate_encode_manifest: "synth/synth.manifest".into(),
            annotate_extract_manifest: "generated/generated.manifest".into(),
            filter_manifest: "generated/generated.manifest".into(),
            detect_manifest: "synth/synth.manifest".into(),
            eval_detections_dir: "detections".into(),
            eval_ground_truth_dir: "synth".into(),
        }
    }
}

config_keys![
    (seed, u64),
    (out_dir, String),
    (jobs, usize),
    (image_size, usize),
    (latent_factor, usize),
    (schedule_steps, usize),
    (beta_start, f64),
    (beta_end, f64),
    (features, usize),
    (time_dim, usize),
    (cond_dim, usize),
    (residual, bool),
    (pretrain_steps, usize),
    (pretrain_lr, f64),
    (batch_size, usize),
    (weight_decay, f64),
    (finetune_epochs, usize),
    (finetune_lr, f64),
    (lambda, f64),
    (prior_count, usize),
    (instance_count, usize),
    (share_priors, bool),
    (identifier, String),
    (class_noun, String),
    (subject, ColorClass),
    (synth_count, usize),
    (synth_color, SynthColor),
    (apple_count_min, usize),
    (apple_count_max, usize),
    (radius_min, f64),
    (radius_max, f64),
    (occlusion_prob, f64),
    (background_noise, f64),
    (generate_total, usize),
    (ratio_green, u64),
    (ratio_red, u64),
    (dot_side, usize),
    (dot_intensity, f64),
    (extraction_threshold, f64),
    (pca_dims, usize),
    (tsne_perplexity, f64),
    (tsne_iters, usize),
    (kmeans_k, usize),
    (kmeans_restarts, usize),
    (nms_iou, f64),
    (min_blob_area, usize),
    (gradcheck_seeds, u64),
    (synth_manifest, String),
    (annotate_encode_manifest, String),
    (annotate_extract_manifest, String),
    (filter_manifest, String),
    (detect_manifest, String),
    (eval_detections_dir, String),
    (eval_ground_truth_dir, String),
];

impl RunConfig {
    /// Parse a config file's text. `source` names it in diagnostics.
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut config = Self::default();
        let mut seen = BTreeSet::new();
        for (idx, raw) in text.lines().enumerate() {
            let lineno = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("{source}:{lineno}: expected 'key = value'"))
            })?;
            let key = key.trim();
            let value = value.trim();
            if key.is_empty() {
                return Err(Error::Config(format!("{source}:{lineno}: empty key")));
            }
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!(
                    "{source}:{lineno}: duplicate key '{key}'"
                )));
            }
            config
                .apply(key, value)
                .map_err(|e| Error::Config(format!("{source}:{lineno}: {e}")))?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = crate::error::at_path(std::fs::read_to_string(path), path)?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.latent_factor == 0 {
            return Err(Error::Config("image_size and latent_factor must be positive".into()));
        }
        if self.image_size % self.latent_factor != 0 {
            return Err(Error::Config(format!(
                "latent_factor {} does not divide image_size {}",
                self.latent_factor, self.image_size
            )));
        }
        self.schedule().map_err(|e| Error::Config(e.to_string()))?;
        self.denoiser_config()
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.scene_spec(ColorClass::Red)
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.dot_config()
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.filter_config()
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.dreambooth_config()
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.adam_pretrain()
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.adam_finetune()
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.instance_count == 0 {
            return Err(Error::Config("instance_count must be positive".into()));
        }
        if !(self.nms_iou > 0.0 && self.nms_iou < 1.0) {
            return Err(Error::Config("nms_iou must lie in (0, 1)".into()));
        }
        if self.gradcheck_seeds == 0 {
            return Err(Error::Config("gradcheck_seeds must be positive".into()));
        }
        if self.ratio_green + self.ratio_red == 0 {
            return Err(Error::Config("generation ratio must not be 0:0".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        DiffusionSchedule::linear(self.schedule_steps, self.beta_start, self.beta_end)
    }

    pub fn denoiser_config(&self) -> DenoiserConfig {
        DenoiserConfig {
            latent_channels: 3,
            features: self.features,
            time_dim: self.time_dim,
            cond_dim: self.cond_dim,
            residual: self.residual,
        }
    }

    pub fn scene_spec(&self, color: ColorClass) -> SceneSpec {
        SceneSpec {
            height: self.image_size,
            width: self.image_size,
            apple_count_range: (self.apple_count_min, self.apple_count_max),
            radius_range: (self.radius_min, self.radius_max),
            color_class: color,
            background: BackgroundSpec {
                noise_amplitude: self.background_noise,
                ..BackgroundSpec::default()
            },
            occlusion_prob: self.occlusion_prob,
        }
    }

    pub fn dot_config(&self) -> DotConfig {
        DotConfig {
            dot_side: self.dot_side,
            intensity: self.dot_intensity,
            extraction_threshold: self.extraction_threshold,
            ..DotConfig::default()
        }
    }

    pub fn filter_config(&self) -> FilterConfig {
        FilterConfig {
            pca_dims: self.pca_dims,
            tsne_dims: 2,
            tsne_perplexity: self.tsne_perplexity,
            tsne_iters: self.tsne_iters,
            kmeans_k: self.kmeans_k,
            kmeans_restarts: self.kmeans_restarts,
        }
    }

    pub fn dreambooth_config(&self) -> DreamBoothConfig {
        DreamBoothConfig {
            identifier: self.identifier.clone(),
            class_noun: self.class_noun.clone(),
            lambda: self.lambda,
            prior_count: self.prior_count,
            epochs: self.finetune_epochs,
        }
    }

    pub fn adam_pretrain(&self) -> AdamHyper {
        AdamHyper {
            lr: self.pretrain_lr,
            weight_decay: self.weight_decay,
            ..AdamHyper::default()
        }
    }

    pub fn adam_finetune(&self) -> AdamHyper {
        AdamHyper {
            lr: self.finetune_lr,
            weight_decay: self.weight_decay,
            ..AdamHyper::default()
        }
    }

    /// Latent tensor shape for one image.
    pub fn latent_shape(&self) -> (usize, usize, usize) {
        (
            3,
            self.image_size / self.latent_factor,
            self.image_size / self.latent_factor,
        )
    }
}
