//! C ABI over the pipeline.
//!
//! Conventions: every function returns a [`MamaStatus`]; out-parameters are
//! caller-allocated; handles are opaque pointers freed by their matching
//! `_free` function; strings are NUL-terminated UTF-8. The most recent
//! error message is kept per thread and read with [`mama_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use mama_core::caption::{split_sentences, Caption, CaptionStyle, CaptionTemplate};
use mama_core::commands::{cmd_captions, cmd_eval, cmd_pretrain, cmd_simmap, cmd_synth, EvalMode};
use mama_core::config::{Preset, RunConfig};
use mama_core::encoder::l2_normalize;
use mama_core::error::MamaError;
use mama_core::image::{load_image, GrayImage};
use mama_core::model::Model;
use mama_core::simmap::MapFormat;
use mama_core::tokenizer::Tokenizer;

/// Result codes returned by every API call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MamaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Io = 4,
    Numeric = 5,
    VersionMismatch = 6,
    BufferTooSmall = 7,
    Internal = 8,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(err: &MamaError) -> MamaStatus {
    match err {
        MamaError::Io { .. } => MamaStatus::Io,
        MamaError::Numeric(_) => MamaStatus::Numeric,
        MamaError::Version(_) => MamaStatus::VersionMismatch,
        _ => MamaStatus::InvalidArgument,
    }
}

fn fail(err: MamaError) -> MamaStatus {
    let status = status_of(&err);
    set_error(err.to_string());
    status
}

/// Opaque configuration handle.
pub struct MamaConfig {
    inner: RunConfig,
    template: CaptionTemplate,
}

/// Opaque encoder handle holding a loaded checkpoint.
pub struct MamaEncoder {
    model: Model,
    tokenizer: Tokenizer,
}

unsafe fn cstr<'a>(ptr: *const c_char) -> Result<&'a str, MamaStatus> {
    if ptr.is_null() {
        set_error("null string pointer");
        return Err(MamaStatus::NullPointer);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error("string is not valid UTF-8");
        MamaStatus::InvalidUtf8
    })
}

fn guarded(f: impl FnOnce() -> MamaStatus) -> MamaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => {
            set_error("internal panic");
            MamaStatus::Internal
        }
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mama_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Copy the current thread's last error message into `buf` (NUL-terminated,
/// truncated to `cap`). Returns the full message length in bytes.
///
/// # Safety
/// `buf` must point to at least `cap` writable bytes, or be null with
/// `cap == 0` to query the length.
#[no_mangle]
pub unsafe extern "C" fn mama_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Create a configuration from a preset name ("desk" or "full").
/// Returns null on error.
///
/// # Safety
/// `preset` must be a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn mama_config_new(preset: *const c_char) -> *mut MamaConfig {
    let Ok(name) = cstr(preset) else {
        return std::ptr::null_mut();
    };
    let Some(preset) = Preset::parse(name) else {
        set_error(format!("unknown preset `{name}`"));
        return std::ptr::null_mut();
    };
    Box::into_raw(Box::new(MamaConfig {
        inner: RunConfig::preset(preset),
        template: CaptionTemplate::builtin().clone(),
    }))
}

/// Apply a config file on top of the current configuration.
///
/// # Safety
/// `cfg` must come from `mama_config_new`; `path` must be a valid string.
#[no_mangle]
pub unsafe extern "C" fn mama_config_apply_file(
    cfg: *mut MamaConfig,
    path: *const c_char,
) -> MamaStatus {
    guarded(|| {
        let Some(cfg) = cfg.as_mut() else {
            set_error("null config handle");
            return MamaStatus::NullPointer;
        };
        let path = match cstr(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        let text = match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) => return fail(MamaError::io(path, e)),
        };
        let kv = match mama_core::config::KvFile::parse(&text) {
            Ok(kv) => kv,
            Err(e) => return fail(e),
        };
        match cfg.inner.apply(&kv) {
            Ok(()) => MamaStatus::Ok,
            Err(e) => fail(e),
        }
    })
}

/// Set one `section.key` to a value, both given as strings.
///
/// # Safety
/// `cfg` must come from `mama_config_new`; strings must be valid.
#[no_mangle]
pub unsafe extern "C" fn mama_config_set(
    cfg: *mut MamaConfig,
    section: *const c_char,
    key: *const c_char,
    value: *const c_char,
) -> MamaStatus {
    guarded(|| {
        let Some(cfg) = cfg.as_mut() else {
            set_error("null config handle");
            return MamaStatus::NullPointer;
        };
        let (section, key, value) = match (cstr(section), cstr(key), cstr(value)) {
            (Ok(s), Ok(k), Ok(v)) => (s, k, v),
            (Err(s), _, _) | (_, Err(s), _) | (_, _, Err(s)) => return s,
        };
        match cfg.inner.set(section, key, value) {
            Ok(()) => MamaStatus::Ok,
            Err(e) => fail(e),
        }
    })
}

/// Override every module seed at once.
///
/// # Safety
/// `cfg` must come from `mama_config_new`.
#[no_mangle]
pub unsafe extern "C" fn mama_config_override_seed(cfg: *mut MamaConfig, seed: u64) -> MamaStatus {
    guarded(|| {
        let Some(cfg) = cfg.as_mut() else {
            set_error("null config handle");
            return MamaStatus::NullPointer;
        };
        cfg.inner.override_seed(seed);
        MamaStatus::Ok
    })
}

/// Render the effective configuration into `buf` (NUL-terminated,
/// truncated). Writes the full length to `len_out` when non-null.
///
/// # Safety
/// `cfg` from `mama_config_new`; `buf` points to `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn mama_config_render(
    cfg: *const MamaConfig,
    buf: *mut c_char,
    cap: usize,
    len_out: *mut usize,
) -> MamaStatus {
    guarded(|| {
        let Some(cfg) = cfg.as_ref() else {
            set_error("null config handle");
            return MamaStatus::NullPointer;
        };
        let text = cfg.inner.to_text();
        if !len_out.is_null() {
            *len_out = text.len();
        }
        if buf.is_null() || cap == 0 {
            return MamaStatus::Ok;
        }
        let n = text.len().min(cap - 1);
        std::ptr::copy_nonoverlapping(text.as_ptr(), buf as *mut u8, n);
        *buf.add(n) = 0;
        if n < text.len() {
            set_error(format!(
                "config text is {} bytes, buffer holds {cap}",
                text.len()
            ));
            MamaStatus::BufferTooSmall
        } else {
            MamaStatus::Ok
        }
    })
}

/// # Safety
/// `cfg` must come from `mama_config_new` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn mama_config_free(cfg: *mut MamaConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Generate the synthetic dataset into `out_dir`.
///
/// # Safety
/// `cfg` from `mama_config_new`; `out_dir` a valid string.
#[no_mangle]
pub unsafe extern "C" fn mama_synth(cfg: *const MamaConfig, out_dir: *const c_char) -> MamaStatus {
    guarded(|| {
        let Some(cfg) = cfg.as_ref() else {
            set_error("null config handle");
            return MamaStatus::NullPointer;
        };
        let out = match cstr(out_dir) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match cmd_synth(&cfg.inner, Path::new(out)) {
            Ok(_) => MamaStatus::Ok,
            Err(e) => fail(e),
        }
    })
}

/// Pre-train on the dataset in `data_dir`, writing checkpoint and metrics
/// into `out_dir`.
///
/// # Safety
/// `cfg` from `mama_config_new`; paths valid strings.
#[no_mangle]
pub unsafe extern "C" fn mama_pretrain(
    cfg: *const MamaConfig,
    data_dir: *const c_char,
    out_dir: *const c_char,
) -> MamaStatus {
    guarded(|| {
        let Some(cfg) = cfg.as_ref() else {
            set_error("null config handle");
            return MamaStatus::NullPointer;
        };
        let (data, out) = match (cstr(data_dir), cstr(out_dir)) {
            (Ok(d), Ok(o)) => (d, o),
            (Err(s), _) | (_, Err(s)) => return s,
        };
        match cmd_pretrain(
            &cfg.inner,
            Path::new(data),
            Path::new(out),
            &cfg.template,
            None,
            None,
        ) {
            Ok(_) => MamaStatus::Ok,
            Err(e) => fail(e),
        }
    })
}

/// Evaluate a checkpoint. `mode` is "zeroshot", "probe" or "finetune";
/// `fraction` <= 0 keeps the configured value.
///
/// # Safety
/// `cfg` from `mama_config_new`; paths and `mode` valid strings.
#[no_mangle]
pub unsafe extern "C" fn mama_eval(
    cfg: *const MamaConfig,
    data_dir: *const c_char,
    checkpoint_dir: *const c_char,
    out_dir: *const c_char,
    mode: *const c_char,
    fraction: f64,
    bacc_out: *mut f64,
) -> MamaStatus {
    guarded(|| {
        let Some(cfg) = cfg.as_ref() else {
            set_error("null config handle");
            return MamaStatus::NullPointer;
        };
        let (data, ckpt, out, mode) = match (
            cstr(data_dir),
            cstr(checkpoint_dir),
            cstr(out_dir),
            cstr(mode),
        ) {
            (Ok(d), Ok(c), Ok(o), Ok(m)) => (d, c, o, m),
            (Err(s), _, _, _) | (_, Err(s), _, _) | (_, _, Err(s), _) | (_, _, _, Err(s)) => {
                return s
            }
        };
        let Some(mode) = EvalMode::parse(mode) else {
            set_error(format!("unknown eval mode `{mode}`"));
            return MamaStatus::InvalidArgument;
        };
        let mut config = cfg.inner.clone();
        if fraction > 0.0 {
            config.eval.fraction = fraction;
        }
        match cmd_eval(
            &config,
            Path::new(data),
            Path::new(ckpt),
            Path::new(out),
            mode,
            &cfg.template,
        ) {
            Ok(report) => {
                if !bacc_out.is_null() {
                    *bacc_out = report.balanced_accuracy;
                }
                MamaStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Dump captions for every record to a CSV file. `style` is "structured",
/// "clip" or "tabular"; `mask_prob` < 0 keeps the configured value.
///
/// # Safety
/// `cfg` from `mama_config_new`; paths and `style` valid strings.
#[no_mangle]
pub unsafe extern "C" fn mama_captions(
    cfg: *const MamaConfig,
    data_dir: *const c_char,
    out_csv: *const c_char,
    style: *const c_char,
    mask_prob: f64,
) -> MamaStatus {
    guarded(|| {
        let Some(cfg) = cfg.as_ref() else {
            set_error("null config handle");
            return MamaStatus::NullPointer;
        };
        let (data, out, style) = match (cstr(data_dir), cstr(out_csv), cstr(style)) {
            (Ok(d), Ok(o), Ok(s)) => (d, o, s),
            (Err(s), _, _) | (_, Err(s), _) | (_, _, Err(s)) => return s,
        };
        let Some(style) = CaptionStyle::parse(style) else {
            set_error(format!("unknown caption style `{style}`"));
            return MamaStatus::InvalidArgument;
        };
        let mut config = cfg.inner.clone();
        config.caption.style = style;
        if mask_prob >= 0.0 {
            config.caption.mask_prob = mask_prob;
        }
        match cmd_captions(&config, Path::new(data), Path::new(out), &cfg.template) {
            Ok(_) => MamaStatus::Ok,
            Err(e) => fail(e),
        }
    })
}

/// Export similarity maps for test images. `format` is "csv" or "pgm".
///
/// # Safety
/// `cfg` from `mama_config_new`; paths and `format` valid strings.
#[no_mangle]
pub unsafe extern "C" fn mama_simmap(
    cfg: *const MamaConfig,
    data_dir: *const c_char,
    checkpoint_dir: *const c_char,
    out_dir: *const c_char,
    sentence_index: usize,
    format: *const c_char,
    count: usize,
) -> MamaStatus {
    guarded(|| {
        let Some(cfg) = cfg.as_ref() else {
            set_error("null config handle");
            return MamaStatus::NullPointer;
        };
        let (data, ckpt, out, format) = match (
            cstr(data_dir),
            cstr(checkpoint_dir),
            cstr(out_dir),
            cstr(format),
        ) {
            (Ok(d), Ok(c), Ok(o), Ok(f)) => (d, c, o, f),
            (Err(s), _, _, _) | (_, Err(s), _, _) | (_, _, Err(s), _) | (_, _, _, Err(s)) => {
                return s
            }
        };
        let Some(format) = MapFormat::parse(format) else {
            set_error(format!("unknown map format `{format}`"));
            return MamaStatus::InvalidArgument;
        };
        match cmd_simmap(
            &cfg.inner,
            Path::new(data),
            Path::new(ckpt),
            Path::new(out),
            sentence_index,
            format,
            count,
            &cfg.template,
        ) {
            Ok(_) => MamaStatus::Ok,
            Err(e) => fail(e),
        }
    })
}

/// Load an encoder from a checkpoint directory. Returns null on error.
///
/// # Safety
/// `checkpoint_dir` must be a valid string.
#[no_mangle]
pub unsafe extern "C" fn mama_encoder_load(checkpoint_dir: *const c_char) -> *mut MamaEncoder {
    let Ok(path) = cstr(checkpoint_dir) else {
        return std::ptr::null_mut();
    };
    match mama_core::checkpoint::load_model(Path::new(path)) {
        Ok(model) => {
            let tokenizer = Tokenizer::new(model.config.vocab_size);
            Box::into_raw(Box::new(MamaEncoder { model, tokenizer }))
        }
        Err(e) => {
            set_error(e.to_string());
            std::ptr::null_mut()
        }
    }
}

/// Embedding dimension of a loaded encoder; 0 for a null handle.
///
/// # Safety
/// `enc` from `mama_encoder_load` or null.
#[no_mangle]
pub unsafe extern "C" fn mama_encoder_embed_dim(enc: *const MamaEncoder) -> usize {
    enc.as_ref().map_or(0, |e| e.model.config.embed_dim)
}

/// Expected square image side; 0 for a null handle.
///
/// # Safety
/// `enc` from `mama_encoder_load` or null.
#[no_mangle]
pub unsafe extern "C" fn mama_encoder_image_size(enc: *const MamaEncoder) -> usize {
    enc.as_ref().map_or(0, |e| e.model.config.image_size)
}

unsafe fn write_embedding(embedding: &[f64], out: *mut f32, cap: usize) -> MamaStatus {
    if out.is_null() {
        set_error("null output buffer");
        return MamaStatus::NullPointer;
    }
    if cap < embedding.len() {
        set_error(format!(
            "embedding needs {} floats, buffer holds {cap}",
            embedding.len()
        ));
        return MamaStatus::BufferTooSmall;
    }
    for (i, &v) in embedding.iter().enumerate() {
        *out.add(i) = v as f32;
    }
    MamaStatus::Ok
}

fn encode_image_common(enc: &MamaEncoder, img: &GrayImage) -> Result<Vec<f64>, MamaError> {
    let set = enc.model.encode_image(img)?;
    l2_normalize(&set.global)
}

/// Encode an image file (PGM or grayscale PNG) into a unit-norm global
/// embedding of `mama_encoder_embed_dim` floats.
///
/// # Safety
/// `enc` from `mama_encoder_load`; `path` valid; `out` points to `cap`
/// writable floats.
#[no_mangle]
pub unsafe extern "C" fn mama_encode_image_file(
    enc: *const MamaEncoder,
    path: *const c_char,
    out: *mut f32,
    cap: usize,
) -> MamaStatus {
    guarded(|| {
        let Some(enc) = enc.as_ref() else {
            set_error("null encoder handle");
            return MamaStatus::NullPointer;
        };
        let path = match cstr(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        let img = match load_image(Path::new(path)) {
            Ok(i) => i,
            Err(e) => return fail(e),
        };
        match encode_image_common(enc, &img) {
            Ok(v) => write_embedding(&v, out, cap),
            Err(e) => fail(e),
        }
    })
}

/// Encode raw grayscale pixels in [0, 1], row-major, width*height floats.
///
/// # Safety
/// `enc` from `mama_encoder_load`; `pixels` points to width*height floats;
/// `out` points to `cap` writable floats.
#[no_mangle]
pub unsafe extern "C" fn mama_encode_image_pixels(
    enc: *const MamaEncoder,
    pixels: *const f32,
    width: usize,
    height: usize,
    out: *mut f32,
    cap: usize,
) -> MamaStatus {
    guarded(|| {
        let Some(enc) = enc.as_ref() else {
            set_error("null encoder handle");
            return MamaStatus::NullPointer;
        };
        if pixels.is_null() {
            set_error("null pixel buffer");
            return MamaStatus::NullPointer;
        }
        let data = std::slice::from_raw_parts(pixels, width * height);
        let img = GrayImage {
            width,
            height,
            pixels: data.iter().map(|&p| p as f64).collect(),
        };
        match encode_image_common(enc, &img) {
            Ok(v) => write_embedding(&v, out, cap),
            Err(e) => fail(e),
        }
    })
}

/// Encode UTF-8 text (sentence-split and tokenized internally) into a
/// unit-norm global embedding.
///
/// # Safety
/// `enc` from `mama_encoder_load`; `text` valid; `out` points to `cap`
/// writable floats.
#[no_mangle]
pub unsafe extern "C" fn mama_encode_text(
    enc: *const MamaEncoder,
    text: *const c_char,
    out: *mut f32,
    cap: usize,
) -> MamaStatus {
    guarded(|| {
        let Some(enc) = enc.as_ref() else {
            set_error("null encoder handle");
            return MamaStatus::NullPointer;
        };
        let text = match cstr(text) {
            Ok(t) => t,
            Err(s) => return s,
        };
        let caption = Caption {
            text: text.to_string(),
            sentence_spans: split_sentences(text),
            masked_keywords: Default::default(),
            style: CaptionStyle::Structured,
        };
        let tokens = enc
            .tokenizer
            .tokenize(&caption, enc.model.config.max_text_tokens);
        let set = match enc.model.encode_tokens(&tokens) {
            Ok(s) => s,
            Err(e) => return fail(e),
        };
        match l2_normalize(&set.global) {
            Ok(v) => write_embedding(&v, out, cap),
            Err(e) => fail(e),
        }
    })
}

/// # Safety
/// `enc` must come from `mama_encoder_load` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn mama_encoder_free(enc: *mut MamaEncoder) {
    if !enc.is_null() {
        drop(Box::from_raw(enc));
    }
}
