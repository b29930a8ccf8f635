//! Flat `key = value` configuration with named sections.
//!
//! One format serves three jobs: the user-facing config file, the effective
//! config echoed into every output directory, and the checkpoint manifest.
//! Unknown sections or keys are rejected so typos fail loudly.

use std::fmt::Write as _;

use crate::data_model::SplitSpec;
use crate::encoder::{EncoderConfig, TextEncoderKind};
use crate::error::{MamaError, Result};
use crate::losses::VvNegatives;
use crate::multiview::{AugmentConfig, SamplingStrategy};
use crate::synth::SynthConfig;
use crate::trainer::{OptimizerKind, TrainConfig};

/// Ordered sections of ordered key/value pairs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvFile {
    sections: Vec<(String, Vec<(String, String)>)>,
}

impl KvFile {
    pub fn parse(text: &str) -> Result<KvFile> {
        let mut out = KvFile::default();
        let mut current: Option<usize> = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                out.sections.push((name.trim().to_string(), Vec::new()));
                current = Some(out.sections.len() - 1);
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(MamaError::Config(format!(
                    "line {}: expected `key = value`, got `{line}`",
                    lineno + 1
                )));
            };
            let Some(idx) = current else {
                return Err(MamaError::Config(format!(
                    "line {}: key `{}` appears before any [section]",
                    lineno + 1,
                    key.trim()
                )));
            };
            out.sections[idx]
                .1
                .push((key.trim().to_string(), value.trim().to_string()));
        }
        Ok(out)
    }

    pub fn push(&mut self, section: &str, key: &str, value: impl ToString) {
        let idx = match self.sections.iter().position(|(s, _)| s == section) {
            Some(i) => i,
            None => {
                self.sections.push((section.to_string(), Vec::new()));
                self.sections.len() - 1
            }
        };
        self.sections[idx]
            .1
            .push((key.to_string(), value.to_string()));
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections
            .iter()
            .find(|(s, _)| s == section)
            .and_then(|(_, kvs)| kvs.iter().find(|(k, _)| k == key))
            .map(|(_, v)| v.as_str())
    }

    pub fn sections(&self) -> impl Iterator<Item = (&str, &[(String, String)])> {
        self.sections
            .iter()
            .map(|(s, kvs)| (s.as_str(), kvs.as_slice()))
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (section, kvs) in &self.sections {
            let _ = writeln!(out, "[{section}]");
            for (k, v) in kvs {
                let _ = writeln!(out, "{k} = {v}");
            }
            let _ = writeln!(out);
        }
        out
    }
}

/// Named configuration presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Desk,
    FullScale,
}

impl Preset {
    pub fn parse(s: &str) -> Option<Preset> {
        match s.trim().to_ascii_lowercase().as_str() {
            "desk" => Some(Preset::Desk),
            "full" | "full-scale" | "full_scale" => Some(Preset::FullScale),
            _ => None,
        }
    }
}

/// Caption construction knobs for the captions command.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionCfg {
    pub style: crate::caption::CaptionStyle,
    pub mask_prob: f64,
}

/// Evaluation knobs: zero-shot scoring, linear probe and full fine-tune.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalCfg {
    pub fraction: f64,
    pub zeroshot_temperature: f64,
    pub probe_lr: f64,
    pub probe_steps: u64,
    pub probe_l2: f64,
    pub ft_lr: f64,
    pub ft_weight_decay: f64,
    pub ft_steps: u64,
    pub ft_batch_size: usize,
    pub ft_warmup_steps: u64,
    pub ft_optimizer: OptimizerKind,
    pub eval_seed: u64,
}

/// Complete run configuration; every module's knobs in one place.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub split: SplitSpec,
    pub caption: CaptionCfg,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
    pub synth: SynthConfig,
    pub eval: EvalCfg,
}

impl RunConfig {
    pub fn preset(p: Preset) -> RunConfig {
        match p {
            Preset::Desk => RunConfig {
                split: SplitSpec {
                    train_frac: 0.7,
                    val_frac: 0.1,
                    test_frac: 0.2,
                    seed: 0,
                },
                caption: CaptionCfg {
                    style: crate::caption::CaptionStyle::Structured,
                    mask_prob: 0.8,
                },
                encoder: EncoderConfig::desk(),
                train: TrainConfig::desk(),
                augment: AugmentConfig::default(),
                synth: SynthConfig::default(),
                eval: EvalCfg {
                    fraction: 1.0,
                    zeroshot_temperature: 0.07,
                    probe_lr: 0.5,
                    probe_steps: 300,
                    probe_l2: 1e-4,
                    ft_lr: 0.02,
                    ft_weight_decay: 1e-3,
                    ft_steps: 250,
                    ft_batch_size: 16,
                    ft_warmup_steps: 10,
                    ft_optimizer: OptimizerKind::Sgd,
                    eval_seed: 0,
                },
            },
            Preset::FullScale => RunConfig {
                split: SplitSpec {
                    train_frac: 0.7,
                    val_frac: 0.1,
                    test_frac: 0.2,
                    seed: 0,
                },
                caption: CaptionCfg {
                    style: crate::caption::CaptionStyle::Structured,
                    mask_prob: 0.8,
                },
                encoder: EncoderConfig::full_scale(),
                train: TrainConfig::full_scale(),
                augment: AugmentConfig::default(),
                synth: SynthConfig::default(),
                eval: EvalCfg {
                    fraction: 1.0,
                    zeroshot_temperature: 0.07,
                    probe_lr: 0.5,
                    probe_steps: 1_000,
                    probe_l2: 1e-4,
                    ft_lr: 5e-4,
                    ft_weight_decay: 1e-3,
                    ft_steps: 8_000,
                    ft_batch_size: 36,
                    ft_warmup_steps: 100,
                    ft_optimizer: OptimizerKind::Sgd,
                    eval_seed: 0,
                },
            },
        }
    }

    /// Apply one `section.key = value` assignment.
    pub fn set(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        let bad = || MamaError::Config(format!("invalid value `{value}` for {section}.{key}"));
        let f = |v: &str| -> Result<f64> { v.parse().map_err(|_| bad()) };
        let u = |v: &str| -> Result<u64> { v.parse().map_err(|_| bad()) };
        let us = |v: &str| -> Result<usize> { v.parse().map_err(|_| bad()) };
        let b = |v: &str| -> Result<bool> {
            match v {
                "true" | "1" => Ok(true),
                "false" | "0" => Ok(false),
                _ => Err(bad()),
            }
        };
        match (section, key) {
            ("data", "train_frac") => self.split.train_frac = f(value)?,
            ("data", "val_frac") => self.split.val_frac = f(value)?,
            ("data", "test_frac") => self.split.test_frac = f(value)?,
            ("data", "split_seed") => self.split.seed = u(value)?,
            ("caption", "style") => {
                self.caption.style = crate::caption::CaptionStyle::parse(value).ok_or_else(bad)?
            }
            ("caption", "mask_prob") => self.caption.mask_prob = f(value)?,
            ("encoder", "embed_dim") => self.encoder.embed_dim = us(value)?,
            ("encoder", "patch_rows") => self.encoder.patch_rows = us(value)?,
            ("encoder", "patch_cols") => self.encoder.patch_cols = us(value)?,
            ("encoder", "image_size") => self.encoder.image_size = us(value)?,
            ("encoder", "max_text_tokens") => self.encoder.max_text_tokens = us(value)?,
            ("encoder", "vision_width") => self.encoder.vision_width = us(value)?,
            ("encoder", "text_width") => self.encoder.text_width = us(value)?,
            ("encoder", "vision_blocks") => self.encoder.vision_blocks = us(value)?,
            ("encoder", "text_blocks") => self.encoder.text_blocks = us(value)?,
            ("encoder", "mlp_ratio") => self.encoder.mlp_ratio = us(value)?,
            ("encoder", "vocab_size") => {
                self.encoder.vocab_size = value.parse().map_err(|_| bad())?
            }
            ("encoder", "lora_rank") => self.encoder.lora_rank = us(value)?,
            ("encoder", "lora_alpha") => self.encoder.lora_alpha = f(value)?,
            ("encoder", "text_encoder") => {
                self.encoder.text_encoder_kind = TextEncoderKind::parse(value).ok_or_else(bad)?
            }
            ("train", "lr") => self.train.lr = f(value)?,
            ("train", "weight_decay") => self.train.weight_decay = f(value)?,
            ("train", "total_steps") => self.train.total_steps = u(value)?,
            ("train", "warmup_steps") => self.train.warmup_steps = u(value)?,
            ("train", "delta") => self.train.delta = u(value)?,
            ("train", "batch_size") => self.train.batch_size = us(value)?,
            ("train", "seed") => self.train.seed = u(value)?,
            ("train", "optimizer") => {
                self.train.optimizer = OptimizerKind::parse(value).ok_or_else(bad)?
            }
            ("train", "beta1") => self.train.beta1 = f(value)?,
            ("train", "beta2") => self.train.beta2 = f(value)?,
            ("train", "eps") => self.train.eps = f(value)?,
            ("train", "momentum") => self.train.momentum = f(value)?,
            ("train", "grad_clip") => self.train.grad_clip = f(value)?,
            ("train", "w_max") => self.train.w_max = f(value)?,
            ("train", "strategy") => {
                self.train.strategy = SamplingStrategy::parse(value).ok_or_else(bad)?
            }
            ("train", "mask_prob") => self.train.mask_prob = f(value)?,
            ("train", "tau1") => self.train.tau1 = f(value)?,
            ("train", "tau2_init") => self.train.tau2_init = f(value)?,
            ("train", "tau_local") => self.train.tau_local = f(value)?,
            ("train", "use_vv") => self.train.loss_opts.use_vv = b(value)?,
            ("train", "symmetric_vt") => self.train.loss_opts.symmetric_vt = b(value)?,
            ("train", "vv_negatives") => {
                self.train.loss_opts.vv_negatives = VvNegatives::parse(value).ok_or_else(bad)?
            }
            ("augment", "flip_prob") => self.augment.flip_prob = f(value)?,
            ("augment", "rotate_prob") => self.augment.rotate_prob = f(value)?,
            ("augment", "max_rotate_deg") => self.augment.max_rotate_deg = f(value)?,
            ("augment", "crop_prob") => self.augment.crop_prob = f(value)?,
            ("augment", "min_crop_scale") => self.augment.min_crop_scale = f(value)?,
            ("augment", "jitter_prob") => self.augment.jitter_prob = f(value)?,
            ("augment", "jitter_brightness") => self.augment.jitter_brightness = f(value)?,
            ("augment", "jitter_contrast") => self.augment.jitter_contrast = f(value)?,
            ("synth", "num_patients") => self.synth.num_patients = us(value)?,
            ("synth", "studies_per_patient") => self.synth.studies_per_patient = us(value)?,
            ("synth", "image_size") => self.synth.image_size = us(value)?,
            ("synth", "patch_rows") => self.synth.patch_rows = us(value)?,
            ("synth", "patch_cols") => self.synth.patch_cols = us(value)?,
            ("synth", "num_classes") => self.synth.num_classes = us(value)?,
            ("synth", "feature_strength") => self.synth.feature_strength = f(value)?,
            ("synth", "noise_level") => self.synth.noise_level = f(value)?,
            ("synth", "seed") => self.synth.seed = u(value)?,
            ("synth", "class_priors") => {
                self.synth.class_priors = if value.is_empty() {
                    Vec::new()
                } else {
                    value
                        .split(',')
                        .map(|p| p.trim().parse().map_err(|_| bad()))
                        .collect::<Result<Vec<f64>>>()?
                }
            }
            ("eval", "fraction") => self.eval.fraction = f(value)?,
            ("eval", "zeroshot_temperature") => self.eval.zeroshot_temperature = f(value)?,
            ("eval", "probe_lr") => self.eval.probe_lr = f(value)?,
            ("eval", "probe_steps") => self.eval.probe_steps = u(value)?,
            ("eval", "probe_l2") => self.eval.probe_l2 = f(value)?,
            ("eval", "ft_lr") => self.eval.ft_lr = f(value)?,
            ("eval", "ft_weight_decay") => self.eval.ft_weight_decay = f(value)?,
            ("eval", "ft_steps") => self.eval.ft_steps = u(value)?,
            ("eval", "ft_batch_size") => self.eval.ft_batch_size = us(value)?,
            ("eval", "ft_warmup_steps") => self.eval.ft_warmup_steps = u(value)?,
            ("eval", "ft_optimizer") => {
                self.eval.ft_optimizer = OptimizerKind::parse(value).ok_or_else(bad)?
            }
            ("eval", "eval_seed") => self.eval.eval_seed = u(value)?,
            _ => {
                return Err(MamaError::Config(format!(
                    "unknown configuration key `{section}.{key}`"
                )))
            }
        }
        Ok(())
    }

    /// Apply a parsed file on top of this configuration.
    pub fn apply(&mut self, kv: &KvFile) -> Result<()> {
        for (section, kvs) in kv.sections() {
            for (key, value) in kvs {
                self.set(section, key, value)?;
            }
        }
        Ok(())
    }

    /// Parse a config file on top of a preset base.
    pub fn from_text(text: &str, base: Preset) -> Result<RunConfig> {
        let mut config = RunConfig::preset(base);
        config.apply(&KvFile::parse(text)?)?;
        Ok(config)
    }

    /// Override every module seed at once (the MAMA_SEED hook).
    pub fn override_seed(&mut self, seed: u64) {
        self.split.seed = seed;
        self.train.seed = seed;
        self.synth.seed = seed;
        self.eval.eval_seed = seed;
    }

    pub fn to_kv(&self) -> KvFile {
        let mut kv = KvFile::default();
        kv.push("data", "train_frac", self.split.train_frac);
        kv.push("data", "val_frac", self.split.val_frac);
        kv.push("data", "test_frac", self.split.test_frac);
        kv.push("data", "split_seed", self.split.seed);
        kv.push("caption", "style", self.caption.style.as_str());
        kv.push("caption", "mask_prob", self.caption.mask_prob);
        let e = &self.encoder;
        kv.push("encoder", "embed_dim", e.embed_dim);
        kv.push("encoder", "patch_rows", e.patch_rows);
        kv.push("encoder", "patch_cols", e.patch_cols);
        kv.push("encoder", "image_size", e.image_size);
        kv.push("encoder", "max_text_tokens", e.max_text_tokens);
        kv.push("encoder", "vision_width", e.vision_width);
        kv.push("encoder", "text_width", e.text_width);
        kv.push("encoder", "vision_blocks", e.vision_blocks);
        kv.push("encoder", "text_blocks", e.text_blocks);
        kv.push("encoder", "mlp_ratio", e.mlp_ratio);
        kv.push("encoder", "vocab_size", e.vocab_size);
        kv.push("encoder", "lora_rank", e.lora_rank);
        kv.push("encoder", "lora_alpha", e.lora_alpha);
        kv.push("encoder", "text_encoder", e.text_encoder_kind.as_str());
        let t = &self.train;
        kv.push("train", "lr", t.lr);
        kv.push("train", "weight_decay", t.weight_decay);
        kv.push("train", "total_steps", t.total_steps);
        kv.push("train", "warmup_steps", t.warmup_steps);
        kv.push("train", "delta", t.delta);
        kv.push("train", "batch_size", t.batch_size);
        kv.push("train", "seed", t.seed);
        kv.push("train", "optimizer", t.optimizer.as_str());
        kv.push("train", "beta1", t.beta1);
        kv.push("train", "beta2", t.beta2);
        kv.push("train", "eps", t.eps);
        kv.push("train", "momentum", t.momentum);
        kv.push("train", "grad_clip", t.grad_clip);
        kv.push("train", "w_max", t.w_max);
        kv.push("train", "strategy", t.strategy.as_str());
        kv.push("train", "mask_prob", t.mask_prob);
        kv.push("train", "tau1", t.tau1);
        kv.push("train", "tau2_init", t.tau2_init);
        kv.push("train", "tau_local", t.tau_local);
        kv.push("train", "use_vv", t.loss_opts.use_vv);
        kv.push("train", "symmetric_vt", t.loss_opts.symmetric_vt);
        kv.push("train", "vv_negatives", t.loss_opts.vv_negatives.as_str());
        let a = &self.augment;
        kv.push("augment", "flip_prob", a.flip_prob);
        kv.push("augment", "rotate_prob", a.rotate_prob);
        kv.push("augment", "max_rotate_deg", a.max_rotate_deg);
        kv.push("augment", "crop_prob", a.crop_prob);
        kv.push("augment", "min_crop_scale", a.min_crop_scale);
        kv.push("augment", "jitter_prob", a.jitter_prob);
        kv.push("augment", "jitter_brightness", a.jitter_brightness);
        kv.push("augment", "jitter_contrast", a.jitter_contrast);
        let s = &self.synth;
        kv.push("synth", "num_patients", s.num_patients);
        kv.push("synth", "studies_per_patient", s.studies_per_patient);
        kv.push("synth", "image_size", s.image_size);
        kv.push("synth", "patch_rows", s.patch_rows);
        kv.push("synth", "patch_cols", s.patch_cols);
        kv.push("synth", "num_classes", s.num_classes);
        kv.push("synth", "feature_strength", s.feature_strength);
        kv.push("synth", "noise_level", s.noise_level);
        kv.push("synth", "seed", s.seed);
        kv.push(
            "synth",
            "class_priors",
            s.class_priors
                .iter()
                .map(|p| p.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        let v = &self.eval;
        kv.push("eval", "fraction", v.fraction);
        kv.push("eval", "zeroshot_temperature", v.zeroshot_temperature);
        kv.push("eval", "probe_lr", v.probe_lr);
        kv.push("eval", "probe_steps", v.probe_steps);
        kv.push("eval", "probe_l2", v.probe_l2);
        kv.push("eval", "ft_lr", v.ft_lr);
        kv.push("eval", "ft_weight_decay", v.ft_weight_decay);
        kv.push("eval", "ft_steps", v.ft_steps);
        kv.push("eval", "ft_batch_size", v.ft_batch_size);
        kv.push("eval", "ft_warmup_steps", v.ft_warmup_steps);
        kv.push("eval", "ft_optimizer", v.ft_optimizer.as_str());
        kv.push("eval", "eval_seed", v.eval_seed);
        kv
    }

    pub fn to_text(&self) -> String {
        self.to_kv().render()
    }

    pub fn validate(&self) -> Result<()> {
        self.split.validate()?;
        self.encoder.validate()?;
        self.train.validate()?;
        self.synth.validate()?;
        if !(0.0..=1.0).contains(&self.caption.mask_prob) {
            return Err(MamaError::Config(format!(
                "caption mask_prob {} outside [0, 1]",
                self.caption.mask_prob
            )));
        }
        if !(self.eval.fraction > 0.0 && self.eval.fraction <= 1.0) {
            return Err(MamaError::Config(format!(
                "eval fraction {} outside (0, 1]",
                self.eval.fraction
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trip() {
        let config = RunConfig::preset(Preset::Desk);
        let text = config.to_text();
        let back = RunConfig::from_text(&text, Preset::FullScale).unwrap();
        assert_eq!(back, config);
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = "[train]\nlr = 0.1\nbogus = 2\n";
        match RunConfig::from_text(text, Preset::Desk) {
            Err(MamaError::Config(msg)) => assert!(msg.contains("train.bogus"), "{msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
        let text = "[nosuch]\nx = 1\n";
        assert!(RunConfig::from_text(text, Preset::Desk).is_err());
    }

    #[test]
    fn overrides_apply_on_preset_base() {
        let text = "[train]\nbatch_size = 7\n\n[synth]\nnum_classes = 7\n";
        let config = RunConfig::from_text(text, Preset::Desk).unwrap();
        assert_eq!(config.train.batch_size, 7);
        assert_eq!(config.synth.num_classes, 7);
        // untouched keys keep preset values
        assert_eq!(config.train.total_steps, 500);
    }

    #[test]
    fn full_scale_preset_pins_published_defaults() {
        let c = RunConfig::preset(Preset::FullScale);
        assert_eq!(c.train.lr, 4e-5);
        assert_eq!(c.train.weight_decay, 0.1);
        assert_eq!(c.train.total_steps, 40_000);
        assert_eq!(c.train.warmup_steps, 4_000);
        assert_eq!(c.train.delta, 8_000);
        assert_eq!(c.train.batch_size, 144);
        assert_eq!(c.train.mask_prob, 0.8);
        assert_eq!(c.encoder.image_size, 518);
        assert_eq!(c.eval.ft_lr, 5e-4);
        assert_eq!(c.eval.ft_weight_decay, 1e-3);
        assert_eq!(c.eval.ft_steps, 8_000);
        assert_eq!(c.eval.ft_batch_size, 36);
        assert_eq!(c.eval.ft_warmup_steps, 100);
        assert_eq!(c.eval.ft_optimizer, OptimizerKind::Sgd);
        assert_eq!(c.split.train_frac, 0.7);
        assert_eq!(c.split.val_frac, 0.1);
        assert_eq!(c.split.test_frac, 0.2);
    }

    #[test]
    fn seed_override_touches_every_module() {
        let mut c = RunConfig::preset(Preset::Desk);
        c.override_seed(99);
        assert_eq!(c.split.seed, 99);
        assert_eq!(c.train.seed, 99);
        assert_eq!(c.synth.seed, 99);
    }

    #[test]
    fn kv_parse_rejects_malformed() {
        assert!(KvFile::parse("[a]\nnot a pair\n").is_err());
        assert!(KvFile::parse("key = before section\n").is_err());
        let ok = KvFile::parse("# comment\n[a]\nx = 1\n\n[b]\ny = two words\n").unwrap();
        assert_eq!(ok.get("a", "x"), Some("1"));
        assert_eq!(ok.get("b", "y"), Some("two words"));
    }
}
