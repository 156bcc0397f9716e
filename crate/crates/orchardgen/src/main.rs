//! Thin command-line front end over [`orchardgen::pipeline`].
//!
//! All human-readable output goes to standard error; artifacts are written
//! to files only. Exit codes: 0 success, 2 configuration/validation error,
//! 1 runtime failure.

use clap::{Parser, Subcommand, ValueEnum};
use orchardgen::config::RunConfig;
use orchardgen::pipeline::{self, AnnotateMode};
use orchardgen::{Error, Result};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "orchardgen",
    version,
    about = "Generate, annotate, curate, and score synthetic orchard detection datasets"
)]
struct Cli {
    /// Key=value config file (missing keys take documented defaults)
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Override the master seed
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Override the output directory
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Cap worker threads (0 = one per core)
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,

    /// Override a single config key (repeatable), e.g. --set subject=green
    #[arg(long, global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate procedural orchard scenes with ground-truth annotations
    Synth,
    /// Train the conditioned denoiser on the synthesized scenes
    Pretrain,
    /// Sample the class-prior image set from the pretrained model
    PriorGen,
    /// Fine-tune on the configured subject with prior preservation
    Finetune,
    /// Sample the generated dataset from both fine-tuned models
    Generate,
    /// Encode box annotations into the third channel, or extract them back
    Annotate {
        #[arg(value_enum, value_name = "MODE")]
        mode: ModeArg,
    },
    /// Keep only the largest embedding cluster of a dataset
    Filter,
    /// Run the color-blob detector over a manifest's images
    Detect,
    /// Score detection files against ground-truth files
    Eval,
    /// Verify analytic gradients against central finite differences
    Gradcheck,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    EncodeDots,
    EncodeOutlines,
    Extract,
}

impl From<ModeArg> for AnnotateMode {
    fn from(mode: ModeArg) -> Self {
        match mode {
            ModeArg::EncodeDots => AnnotateMode::EncodeDots,
            ModeArg::EncodeOutlines => AnnotateMode::EncodeOutlines,
            ModeArg::Extract => AnnotateMode::Extract,
        }
    }
}

fn build_config(cli: &Cli) -> Result<RunConfig> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.out_dir = out.display().to_string();
    }
    if let Some(jobs) = cli.jobs {
        config.jobs = jobs;
    }
    for pair in &cli.set {
        let (key, value) = pair.split_once('=').ok_or_else(|| {
            Error::Config(format!("--set expects KEY=VALUE, got '{pair}'"))
        })?;
        config.apply(key.trim(), value.trim())?;
    }
    config.validate()?;
    Ok(config)
}

fn run(cli: Cli) -> Result<()> {
    let config = build_config(&cli)?;
    let out = &config.out_dir;
    match cli.command {
        Command::Synth => {
            let n = pipeline::cmd_synth(&config)?;
            eprintln!("synth: wrote {n} scenes to {out}/synth");
        }
        Command::Pretrain => {
            let losses = pipeline::cmd_pretrain(&config)?;
            let last = losses.last().copied().unwrap_or(f64::NAN);
            eprintln!(
                "pretrain: {} steps, final loss {last:.6}; checkpoint at {out}/pretrain/model.ckpt",
                losses.len()
            );
        }
        Command::PriorGen => {
            let n = pipeline::cmd_prior_gen(&config)?;
            eprintln!("prior-gen: sampled {n} prior images");
        }
        Command::Finetune => {
            let losses = pipeline::cmd_finetune(&config)?;
            let last = losses.last().copied().unwrap_or(f64::NAN);
            eprintln!(
                "finetune[{}]: {} steps, final loss {last:.6}",
                config.subject.tag(),
                losses.len()
            );
        }
        Command::Generate => {
            let (green, red) = pipeline::cmd_generate(&config)?;
            eprintln!("generate: {green} green + {red} red images in {out}/generated");
        }
        Command::Annotate { mode } => {
            let n = pipeline::cmd_annotate(&config, mode.into())?;
            eprintln!("annotate: processed {n} images");
        }
        Command::Filter => {
            let report = pipeline::cmd_filter(&config)?;
            eprintln!(
                "filter: kept {} of {} images (cluster sizes {:?})",
                report.kept.len(),
                report.labels.len(),
                report.cluster_sizes
            );
        }
        Command::Detect => {
            let n = pipeline::cmd_detect(&config)?;
            eprintln!("detect: wrote detections for {n} images to {out}/detections");
        }
        Command::Eval => {
            let report = pipeline::cmd_eval(&config)?;
            eprintln!("{report}");
        }
        Command::Gradcheck => {
            let report = pipeline::cmd_gradcheck(&config)?;
            eprintln!("{report}");
        }
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
