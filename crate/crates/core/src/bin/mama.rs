//! Command-line surface: `synth`, `captions`, `pretrain`, `eval`, `simmap`.
//!
//! Configuration resolves in order: preset, config file, individual flags,
//! with the `MAMA_SEED` environment variable overriding every module seed.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mama_core::caption::{CaptionStyle, CaptionTemplate};
use mama_core::commands::{cmd_captions, cmd_eval, cmd_pretrain, cmd_simmap, cmd_synth, EvalMode};
use mama_core::config::{Preset, RunConfig};
use mama_core::error::MamaError;
use mama_core::multiview::SamplingStrategy;
use mama_core::simmap::MapFormat;

#[derive(Parser)]
#[command(
    name = "mama",
    about = "Multi-view, multi-scale contrastive language-image pre-training on synthetic mammography-style data",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Configuration preset to start from.
    #[arg(long, default_value = "desk", value_parser = parse_preset)]
    preset: Preset,
    /// Config file applied on top of the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Inline overrides, e.g. --set train.lr=1e-3 (repeatable).
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    sets: Vec<String>,
    /// Caption template file; the built-in template when omitted.
    #[arg(long)]
    template: Option<PathBuf>,
}

fn parse_preset(s: &str) -> Result<Preset, String> {
    Preset::parse(s).ok_or_else(|| format!("unknown preset `{s}` (desk, full)"))
}

fn parse_style(s: &str) -> Result<CaptionStyle, String> {
    CaptionStyle::parse(s).ok_or_else(|| format!("unknown style `{s}` (structured, clip, tabular)"))
}

fn parse_views(s: &str) -> Result<SamplingStrategy, String> {
    SamplingStrategy::parse(s).ok_or_else(|| {
        format!("unknown strategy `{s}` (same, intra-side, intra-study-no-self, intra-study)")
    })
}

fn parse_mode(s: &str) -> Result<EvalMode, String> {
    EvalMode::parse(s).ok_or_else(|| format!("unknown mode `{s}` (zeroshot, probe, finetune)"))
}

fn parse_format(s: &str) -> Result<MapFormat, String> {
    MapFormat::parse(s).ok_or_else(|| format!("unknown format `{s}` (csv, pgm)"))
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump one caption per record to CSV.
    Captions {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset directory (from `synth`).
        #[arg(long)]
        data: PathBuf,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
        /// Caption style.
        #[arg(long, value_parser = parse_style)]
        style: Option<CaptionStyle>,
        /// Meta-information masking probability.
        #[arg(long)]
        mask_prob: Option<f64>,
    },
    /// Pre-train the encoders on the train split.
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// Output directory for checkpoint and metrics.
        #[arg(long)]
        out: PathBuf,
        /// Positive-view sampling strategy.
        #[arg(long, value_parser = parse_views)]
        views: Option<SamplingStrategy>,
        /// Disable the local alignment loss (w stays 0).
        #[arg(long)]
        no_sla: bool,
        /// Drop the positive view's visual-text term.
        #[arg(long)]
        no_symmetric_vt: bool,
        /// Drop the image-image contrastive term.
        #[arg(long)]
        no_vv: bool,
        /// Train the text encoder fully instead of low-rank adapters.
        #[arg(long)]
        no_lora: bool,
        /// Override total training steps.
        #[arg(long)]
        steps: Option<u64>,
        /// Resume from an existing checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop and checkpoint after this step without altering the
        /// schedule; resume later to continue.
        #[arg(long)]
        stop_step: Option<u64>,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = parse_mode)]
        mode: EvalMode,
        /// Training fraction for linear probing.
        #[arg(long)]
        fraction: Option<f64>,
    },
    /// Export per-sentence similarity maps for test images.
    Simmap {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Sentence to visualize.
        #[arg(long, default_value_t = 0)]
        sentence_index: usize,
        #[arg(long, default_value = "pgm", value_parser = parse_format)]
        format: MapFormat,
        /// Number of test images to export.
        #[arg(long, default_value_t = 8)]
        count: usize,
    },
}

fn resolve_config(args: &ConfigArgs) -> mama_core::Result<(RunConfig, CaptionTemplate)> {
    let mut config = RunConfig::preset(args.preset);
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| MamaError::io(path.display().to_string(), e))?;
        config = RunConfig::from_text(&text, args.preset)?;
    }
    for assignment in &args.sets {
        let (key, value) = assignment.split_once('=').ok_or_else(|| {
            MamaError::Config(format!("--set needs SECTION.KEY=VALUE, got `{assignment}`"))
        })?;
        let (section, key) = key.trim().split_once('.').ok_or_else(|| {
            MamaError::Config(format!("--set key must be SECTION.KEY, got `{key}`"))
        })?;
        config.set(section, key.trim(), value.trim())?;
    }
    if let Ok(seed) = std::env::var("MAMA_SEED") {
        let seed: u64 = seed
            .trim()
            .parse()
            .map_err(|_| MamaError::Config(format!("MAMA_SEED `{seed}` is not an integer")))?;
        config.override_seed(seed);
    }
    let template = match &args.template {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| MamaError::io(path.display().to_string(), e))?;
            CaptionTemplate::parse(&text)?
        }
        None => CaptionTemplate::builtin().clone(),
    };
    Ok((config, template))
}

fn run() -> mama_core::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Synth { cfg, out } => {
            let (config, _) = resolve_config(&cfg)?;
            let n = cmd_synth(&config, &out)?;
            println!("wrote {n} records to {}", out.display());
        }
        Command::Captions {
            cfg,
            data,
            out,
            style,
            mask_prob,
        } => {
            let (mut config, template) = resolve_config(&cfg)?;
            if let Some(style) = style {
                config.caption.style = style;
            }
            if let Some(p) = mask_prob {
                config.caption.mask_prob = p;
            }
            let n = cmd_captions(&config, &data, &out, &template)?;
            println!("wrote {n} captions to {}", out.display());
        }
        Command::Pretrain {
            cfg,
            data,
            out,
            views,
            no_sla,
            no_symmetric_vt,
            no_vv,
            no_lora,
            steps,
            resume,
            stop_step,
        } => {
            let (mut config, template) = resolve_config(&cfg)?;
            if let Some(views) = views {
                config.train.strategy = views;
            }
            if no_sla {
                config.train.w_max = 0.0;
            }
            if no_symmetric_vt {
                config.train.loss_opts.symmetric_vt = false;
            }
            if no_vv {
                config.train.loss_opts.use_vv = false;
            }
            if no_lora {
                config.encoder.lora_rank = 0;
            }
            if let Some(steps) = steps {
                config.train.total_steps = steps;
                config.train.warmup_steps = config.train.warmup_steps.min(steps);
                config.train.delta = config.train.delta.min(steps);
            }
            let out_run = cmd_pretrain(
                &config,
                &data,
                &out,
                &template,
                resume.as_deref(),
                stop_step,
            )?;
            println!(
                "trained {} steps; checkpoint at {}",
                out_run.final_state.step,
                out_run.checkpoint.display()
            );
        }
        Command::Eval {
            cfg,
            data,
            checkpoint,
            out,
            mode,
            fraction,
        } => {
            let (mut config, template) = resolve_config(&cfg)?;
            if let Some(f) = fraction {
                config.eval.fraction = f;
            }
            let report = cmd_eval(&config, &data, &checkpoint, &out, mode, &template)?;
            println!(
                "{}: bACC {:.4}, AUC {}",
                mode.as_str(),
                report.balanced_accuracy,
                report
                    .auc
                    .map_or("absent".to_string(), |a| format!("{a:.4}"))
            );
        }
        Command::Simmap {
            cfg,
            data,
            checkpoint,
            out,
            sentence_index,
            format,
            count,
        } => {
            let (config, template) = resolve_config(&cfg)?;
            let written = cmd_simmap(
                &config,
                &data,
                &checkpoint,
                &out,
                sentence_index,
                format,
                count,
                &template,
            )?;
            println!("wrote {} maps to {}", written.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
