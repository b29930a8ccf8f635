//! Checkpoint directory format.
//!
//! A checkpoint is a directory holding `manifest.txt` (config echo, step
//! count, rng and optimizer bookkeeping) plus one binary array file per
//! named parameter under `params/`, and optimizer moments under `m1/` and
//! `m2/`. Arrays are little-endian f32 with a fixed header:
//!
//! ```text
//! magic "MAMA" | u32 version | u32 rows | u32 cols | rows*cols f32 LE
//! ```
//!
//! Writes go to a sibling temp directory first and are renamed into place.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::config::KvFile;
use crate::encoder::{EncoderConfig, TextEncoderKind};
use crate::error::{MamaError, Result};
use crate::losses::VvNegatives;
use crate::mat::Mat;
use crate::model::Model;
use crate::multiview::SamplingStrategy;
use crate::rng::Rng;
use crate::trainer::{Optimizer, OptimizerKind, TrainConfig, TrainState};

const MAGIC: &[u8; 4] = b"MAMA";
const FORMAT_VERSION: u32 = 1;

pub fn write_array(path: &Path, m: &Mat) -> Result<()> {
    let mut bytes = Vec::with_capacity(16 + m.len() * 4);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    bytes.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for &v in m.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| MamaError::io(path.display().to_string(), e))
}

pub fn read_array(path: &Path, name: &str) -> Result<Mat> {
    let bad = |m: &str| MamaError::Version(format!("parameter `{name}`: {m}"));
    let bytes = fs::read(path).map_err(|e| {
        MamaError::Version(format!(
            "parameter `{name}`: cannot read {}: {e}",
            path.display()
        ))
    })?;
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(bad("bad magic or truncated header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    if word(4) != FORMAT_VERSION {
        return Err(bad(&format!("unsupported array version {}", word(4))));
    }
    let rows = word(8) as usize;
    let cols = word(12) as usize;
    if bytes.len() != 16 + rows * cols * 4 {
        return Err(bad(&format!(
            "expected {} data bytes, found {}",
            rows * cols * 4,
            bytes.len() - 16
        )));
    }
    let mut data = Vec::with_capacity(rows * cols);
    for chunk in bytes[16..].chunks_exact(4) {
        data.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
    }
    Ok(Mat::from_vec(rows, cols, data))
}

fn encoder_to_kv(kv: &mut KvFile, e: &EncoderConfig) {
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
}

fn require<'k>(kv: &'k KvFile, section: &str, key: &str) -> Result<&'k str> {
    kv.get(section, key)
        .ok_or_else(|| MamaError::Version(format!("manifest missing `{section}.{key}`")))
}

fn encoder_from_kv(kv: &KvFile) -> Result<EncoderConfig> {
    let us = |key: &str| -> Result<usize> {
        require(kv, "encoder", key)?
            .parse()
            .map_err(|_| MamaError::Version(format!("bad encoder.{key}")))
    };
    Ok(EncoderConfig {
        embed_dim: us("embed_dim")?,
        patch_rows: us("patch_rows")?,
        patch_cols: us("patch_cols")?,
        image_size: us("image_size")?,
        max_text_tokens: us("max_text_tokens")?,
        vision_width: us("vision_width")?,
        text_width: us("text_width")?,
        vision_blocks: us("vision_blocks")?,
        text_blocks: us("text_blocks")?,
        mlp_ratio: us("mlp_ratio")?,
        vocab_size: require(kv, "encoder", "vocab_size")?
            .parse()
            .map_err(|_| MamaError::Version("bad encoder.vocab_size".into()))?,
        lora_rank: us("lora_rank")?,
        lora_alpha: require(kv, "encoder", "lora_alpha")?
            .parse()
            .map_err(|_| MamaError::Version("bad encoder.lora_alpha".into()))?,
        text_encoder_kind: TextEncoderKind::parse(require(kv, "encoder", "text_encoder")?)
            .ok_or_else(|| MamaError::Version("bad encoder.text_encoder".into()))?,
    })
}

fn train_to_kv(kv: &mut KvFile, t: &TrainConfig) {
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
}

fn train_from_kv(kv: &KvFile) -> Result<TrainConfig> {
    let f = |key: &str| -> Result<f64> {
        require(kv, "train", key)?
            .parse()
            .map_err(|_| MamaError::Version(format!("bad train.{key}")))
    };
    let u = |key: &str| -> Result<u64> {
        require(kv, "train", key)?
            .parse()
            .map_err(|_| MamaError::Version(format!("bad train.{key}")))
    };
    let b = |key: &str| -> Result<bool> {
        match require(kv, "train", key)? {
            "true" => Ok(true),
            "false" => Ok(false),
            other => Err(MamaError::Version(format!("bad train.{key}: {other}"))),
        }
    };
    Ok(TrainConfig {
        lr: f("lr")?,
        weight_decay: f("weight_decay")?,
        total_steps: u("total_steps")?,
        warmup_steps: u("warmup_steps")?,
        delta: u("delta")?,
        batch_size: require(kv, "train", "batch_size")?
            .parse()
            .map_err(|_| MamaError::Version("bad train.batch_size".into()))?,
        seed: u("seed")?,
        optimizer: OptimizerKind::parse(require(kv, "train", "optimizer")?)
            .ok_or_else(|| MamaError::Version("bad train.optimizer".into()))?,
        beta1: f("beta1")?,
        beta2: f("beta2")?,
        eps: f("eps")?,
        momentum: f("momentum")?,
        grad_clip: f("grad_clip")?,
        w_max: f("w_max")?,
        strategy: SamplingStrategy::parse(require(kv, "train", "strategy")?)
            .ok_or_else(|| MamaError::Version("bad train.strategy".into()))?,
        mask_prob: f("mask_prob")?,
        tau1: f("tau1")?,
        tau2_init: f("tau2_init")?,
        tau_local: f("tau_local")?,
        loss_opts: crate::losses::LossOptions {
            use_vv: b("use_vv")?,
            symmetric_vt: b("symmetric_vt")?,
            vv_negatives: VvNegatives::parse(require(kv, "train", "vv_negatives")?)
                .ok_or_else(|| MamaError::Version("bad train.vv_negatives".into()))?,
        },
    })
}

/// Write the full training state. The write lands atomically via a sibling
/// temp directory and a final rename.
pub fn save(state: &TrainState, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| MamaError::io(tmp.display().to_string(), e))?;
    }
    for sub in ["params", "m1", "m2"] {
        let dir = tmp.join(sub);
        fs::create_dir_all(&dir).map_err(|e| MamaError::io(dir.display().to_string(), e))?;
    }

    let mut kv = KvFile::default();
    kv.push("checkpoint", "format", FORMAT_VERSION);
    kv.push("checkpoint", "step", state.step);
    let rng_state = state.rng.state();
    kv.push(
        "checkpoint",
        "rng",
        format!(
            "{:016x},{:016x},{:016x},{:016x}",
            rng_state[0], rng_state[1], rng_state[2], rng_state[3]
        ),
    );
    kv.push("checkpoint", "optimizer_t", state.optimizer.t);
    kv.push(
        "checkpoint",
        "params",
        state.model.params.names().collect::<Vec<_>>().join(";"),
    );
    kv.push(
        "checkpoint",
        "m1",
        state
            .optimizer
            .m1
            .keys()
            .cloned()
            .collect::<Vec<_>>()
            .join(";"),
    );
    kv.push(
        "checkpoint",
        "m2",
        state
            .optimizer
            .m2
            .keys()
            .cloned()
            .collect::<Vec<_>>()
            .join(";"),
    );
    encoder_to_kv(&mut kv, &state.model.config);
    train_to_kv(&mut kv, &state.config);
    let manifest = tmp.join("manifest.txt");
    fs::write(&manifest, kv.render())
        .map_err(|e| MamaError::io(manifest.display().to_string(), e))?;

    for (name, p) in state.model.params.iter() {
        write_array(&tmp.join("params").join(format!("{name}.bin")), &p.value)?;
    }
    for (name, m) in &state.optimizer.m1 {
        write_array(&tmp.join("m1").join(format!("{name}.bin")), m)?;
    }
    for (name, m) in &state.optimizer.m2 {
        write_array(&tmp.join("m2").join(format!("{name}.bin")), m)?;
    }

    if path.exists() {
        fs::remove_dir_all(path).map_err(|e| MamaError::io(path.display().to_string(), e))?;
    }
    fs::rename(&tmp, path).map_err(|e| MamaError::io(path.display().to_string(), e))?;
    Ok(())
}

fn read_manifest(path: &Path) -> Result<KvFile> {
    let manifest = path.join("manifest.txt");
    let text = fs::read_to_string(&manifest)
        .map_err(|e| MamaError::io(manifest.display().to_string(), e))?;
    let kv = KvFile::parse(&text)?;
    let format = require(&kv, "checkpoint", "format")?;
    if format != FORMAT_VERSION.to_string() {
        return Err(MamaError::Version(format!(
            "checkpoint format {format}, expected {FORMAT_VERSION}"
        )));
    }
    Ok(kv)
}

/// Restore a full training state bit-exactly.
pub fn load(path: &Path) -> Result<TrainState> {
    let kv = read_manifest(path)?;
    let encoder = encoder_from_kv(&kv)?;
    let train = train_from_kv(&kv)?;
    let step: u64 = require(&kv, "checkpoint", "step")?
        .parse()
        .map_err(|_| MamaError::Version("bad checkpoint.step".into()))?;
    let optimizer_t: u64 = require(&kv, "checkpoint", "optimizer_t")?
        .parse()
        .map_err(|_| MamaError::Version("bad checkpoint.optimizer_t".into()))?;
    let rng_raw = require(&kv, "checkpoint", "rng")?;
    let rng_words: Vec<u64> = rng_raw
        .split(',')
        .map(|w| u64::from_str_radix(w, 16))
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| MamaError::Version(format!("bad rng state `{rng_raw}`")))?;
    if rng_words.len() != 4 {
        return Err(MamaError::Version(format!("bad rng state `{rng_raw}`")));
    }

    // rebuild the layout (shapes + trainable flags) from the config, then
    // overwrite every value from disk
    let mut model = Model::init(encoder, 0)?;
    let saved: Vec<String> = require(&kv, "checkpoint", "params")?
        .split(';')
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect();
    let expected: Vec<String> = model.params.names().map(String::from).collect();
    if saved != expected {
        return Err(MamaError::Version(format!(
            "parameter set mismatch: checkpoint has {} names, config implies {}",
            saved.len(),
            expected.len()
        )));
    }
    for name in &expected {
        let value = read_array(&path.join("params").join(format!("{name}.bin")), name)?;
        let slot = model.params.get_mut(name);
        if value.shape() != slot.shape() {
            return Err(MamaError::Version(format!(
                "parameter `{name}`: shape {:?} on disk vs {:?} in config",
                value.shape(),
                slot.shape()
            )));
        }
        *slot = value;
    }

    let mut optimizer = Optimizer::new(&train);
    optimizer.t = optimizer_t;
    let moment_names = |key: &str| -> Result<Vec<String>> {
        Ok(require(&kv, "checkpoint", key)?
            .split(';')
            .filter(|s| !s.is_empty())
            .map(String::from)
            .collect())
    };
    let mut m1 = BTreeMap::new();
    for name in moment_names("m1")? {
        let m = read_array(&path.join("m1").join(format!("{name}.bin")), &name)?;
        m1.insert(name, m);
    }
    let mut m2 = BTreeMap::new();
    for name in moment_names("m2")? {
        let m = read_array(&path.join("m2").join(format!("{name}.bin")), &name)?;
        m2.insert(name, m);
    }
    optimizer.m1 = m1;
    optimizer.m2 = m2;

    Ok(TrainState {
        model,
        optimizer,
        step,
        rng: Rng::from_state([rng_words[0], rng_words[1], rng_words[2], rng_words[3]]),
        config: train,
    })
}

/// Read only the encoder configuration from a checkpoint manifest.
pub fn read_encoder_config(path: &Path) -> Result<EncoderConfig> {
    encoder_from_kv(&read_manifest(path)?)
}

/// Load just the model (parameters plus config) for evaluation.
pub fn load_model(path: &Path) -> Result<Model> {
    Ok(load(path)?.model)
}
