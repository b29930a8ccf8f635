//! Pre-training orchestration: optimizer, learning-rate schedule, the
//! per-step forward/backward over a pair batch, and metric logging.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::encoder::EncoderConfig;
use crate::error::{MamaError, Result};
use crate::graph::{Graph, NodeId};
use crate::losses::{
    clip_vt_node, info_nce_vv_node, local_loss_node, local_scores_node, schedule_weight,
    LossBreakdown, LossOptions, Temperatures, TAU2_MAX, TAU2_MIN,
};
use crate::mat::Mat;
use crate::model::{Model, ParamLeaves, TAU2_PARAM};
use crate::multiview::{PairBatch, SamplingStrategy};
use crate::rng::Rng;
use crate::tokenizer::Tokenizer;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    AdamW,
    Sgd,
}

impl OptimizerKind {
    pub fn parse(s: &str) -> Option<OptimizerKind> {
        match s.trim().to_ascii_lowercase().as_str() {
            "adamw" => Some(OptimizerKind::AdamW),
            "sgd" => Some(OptimizerKind::Sgd),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            OptimizerKind::AdamW => "adamw",
            OptimizerKind::Sgd => "sgd",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub total_steps: u64,
    pub warmup_steps: u64,
    /// Step at which the local alignment loss switches on.
    pub delta: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub momentum: f64,
    /// Global-norm gradient clip; 0 disables.
    pub grad_clip: f64,
    /// Weight applied to the local loss once past `delta`.
    pub w_max: f64,
    pub strategy: SamplingStrategy,
    pub mask_prob: f64,
    pub tau1: f64,
    pub tau2_init: f64,
    pub tau_local: f64,
    pub loss_opts: LossOptions,
}

impl TrainConfig {
    /// Production defaults: AdamW 4e-5, weight decay 0.1, 40k steps with 4k
    /// warmup, local loss from 8k, batch 144.
    pub fn full_scale() -> Self {
        TrainConfig {
            lr: 4e-5,
            weight_decay: 0.1,
            total_steps: 40_000,
            warmup_steps: 4_000,
            delta: 8_000,
            batch_size: 144,
            seed: 0,
            optimizer: OptimizerKind::AdamW,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            momentum: 0.9,
            grad_clip: 1.0,
            w_max: 1.0,
            strategy: SamplingStrategy::IntraStudy,
            mask_prob: 0.8,
            tau1: 0.5,
            tau2_init: 0.07,
            tau_local: 0.1,
            loss_opts: LossOptions::default(),
        }
    }

    /// CPU-sized run: 500 steps, 50 warmup, local loss from step 100,
    /// batch 16.
    pub fn desk() -> Self {
        TrainConfig {
            lr: 2e-3,
            total_steps: 500,
            warmup_steps: 50,
            delta: 100,
            batch_size: 16,
            tau_local: 0.03,
            ..TrainConfig::full_scale()
        }
    }

    pub fn temperatures(&self, tau2: f64) -> Temperatures {
        Temperatures {
            tau1: self.tau1,
            tau2,
            tau_local: self.tau_local,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(MamaError::Config(format!(
                "lr {} must be positive",
                self.lr
            )));
        }
        if self.warmup_steps > self.total_steps {
            return Err(MamaError::Config(format!(
                "warmup {} exceeds total steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if self.delta > self.total_steps {
            return Err(MamaError::Config(format!(
                "delta {} exceeds total steps {}",
                self.delta, self.total_steps
            )));
        }
        if self.batch_size == 0 {
            return Err(MamaError::Config("batch size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return Err(MamaError::Config(format!(
                "mask_prob {} outside [0, 1]",
                self.mask_prob
            )));
        }
        Temperatures {
            tau1: self.tau1,
            tau2: self.tau2_init,
            tau_local: self.tau_local,
        }
        .validate()
    }
}

/// Linear warmup to `lr`, then cosine decay to zero at `total_steps`.
pub fn lr_at(step: u64, config: &TrainConfig) -> Result<f64> {
    if step > config.total_steps {
        return Err(MamaError::Input(format!(
            "step {step} outside schedule of {} steps",
            config.total_steps
        )));
    }
    if step < config.warmup_steps {
        return Ok(config.lr * step as f64 / config.warmup_steps as f64);
    }
    let span = config.total_steps - config.warmup_steps;
    if span == 0 {
        return Ok(config.lr);
    }
    let progress = (step - config.warmup_steps) as f64 / span as f64;
    Ok(config.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// First-order optimizer with decoupled weight decay and global-norm
/// clipping. Moments are quantized to f32 after every step to match the
/// checkpoint array precision.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub m1: BTreeMap<String, Mat>,
    pub m2: BTreeMap<String, Mat>,
    pub t: u64,
}

impl Optimizer {
    pub fn new(config: &TrainConfig) -> Self {
        Optimizer {
            kind: config.optimizer,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.eps,
            momentum: config.momentum,
            weight_decay: config.weight_decay,
            grad_clip: config.grad_clip,
            m1: BTreeMap::new(),
            m2: BTreeMap::new(),
            t: 0,
        }
    }

    /// Apply one update over named (parameter, gradient) pairs.
    pub fn step(&mut self, updates: &mut [(&str, &mut Mat, Mat)], lr: f64) {
        self.t += 1;
        let mut grads: Vec<Mat> = updates.iter().map(|(_, _, g)| g.clone()).collect();
        if self.grad_clip > 0.0 {
            let norm: f64 = grads
                .iter()
                .map(|g| g.data().iter().map(|x| x * x).sum::<f64>())
                .sum::<f64>()
                .sqrt();
            if norm > self.grad_clip {
                let scale = self.grad_clip / norm;
                for g in &mut grads {
                    for x in g.data_mut() {
                        *x *= scale;
                    }
                }
            }
        }
        for ((name, param, _), grad) in updates.iter_mut().zip(&grads) {
            match self.kind {
                OptimizerKind::AdamW => {
                    let m = self
                        .m1
                        .entry(name.to_string())
                        .or_insert_with(|| Mat::zeros(param.rows(), param.cols()));
                    let v = self
                        .m2
                        .entry(name.to_string())
                        .or_insert_with(|| Mat::zeros(param.rows(), param.cols()));
                    let bc1 = 1.0 - self.beta1.powi(self.t as i32);
                    let bc2 = 1.0 - self.beta2.powi(self.t as i32);
                    for i in 0..param.len() {
                        let gi = grad.data()[i];
                        let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * gi;
                        let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * gi * gi;
                        m.data_mut()[i] = mi as f32 as f64;
                        v.data_mut()[i] = vi as f32 as f64;
                        let mhat = mi / bc1;
                        let vhat = vi / bc2;
                        let p = param.data()[i];
                        let next =
                            p - lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * p);
                        param.data_mut()[i] = next as f32 as f64;
                    }
                }
                OptimizerKind::Sgd => {
                    let buf = self
                        .m1
                        .entry(name.to_string())
                        .or_insert_with(|| Mat::zeros(param.rows(), param.cols()));
                    for i in 0..param.len() {
                        let gi = grad.data()[i] + self.weight_decay * param.data()[i];
                        let bi = self.momentum * buf.data()[i] + gi;
                        buf.data_mut()[i] = bi as f32 as f64;
                        let next = param.data()[i] - lr * bi;
                        param.data_mut()[i] = next as f32 as f64;
                    }
                }
            }
        }
    }
}

/// Mutable training state: model parameters, optimizer moments, step
/// counter and the data rng.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub optimizer: Optimizer,
    pub step: u64,
    pub rng: Rng,
    pub config: TrainConfig,
}

impl TrainState {
    pub fn new(model: Model, config: TrainConfig) -> Result<TrainState> {
        config.validate()?;
        let mut model = model;
        *model.params.get_mut(TAU2_PARAM) = Mat::scalar(config.tau2_init as f32 as f64);
        Ok(TrainState {
            optimizer: Optimizer::new(&config),
            rng: Rng::new(config.seed).derive(0x7261_696e),
            step: 0,
            model,
            config,
        })
    }

    pub fn tau2(&self) -> f64 {
        self.model.params.get(TAU2_PARAM).item()
    }
}

struct EncodedBatch {
    v: NodeId,
    v_pos: NodeId,
    t: NodeId,
    sentence_feats: Vec<NodeId>,
    patch_feats: Vec<NodeId>,
}

fn encode_batch(
    model: &Model,
    g: &mut Graph,
    leaves: &ParamLeaves,
    batch: &PairBatch,
    need_local: bool,
    tokenizer: &Tokenizer,
) -> Result<EncodedBatch> {
    let mut v_rows = Vec::with_capacity(batch.len());
    let mut p_rows = Vec::with_capacity(batch.len());
    let mut t_rows = Vec::with_capacity(batch.len());
    let mut sentence_feats = Vec::new();
    let mut patch_feats = Vec::new();
    let patch_idx: Vec<usize> = (1..=model.config.patch_count()).collect();

    for i in 0..batch.len() {
        let vis = model.vision_forward(g, leaves, &batch.primary_images[i])?;
        let pos = model.vision_forward(g, leaves, &batch.positive_images[i])?;
        let tokens = tokenizer.tokenize(&batch.captions[i], model.config.max_text_tokens);
        if tokens.is_empty() {
            return Err(MamaError::Input(format!(
                "caption for {} tokenized to nothing",
                batch.records[i].image_id
            )));
        }
        let txt = model.text_forward(g, leaves, &tokens)?;
        v_rows.push(vis.pooled);
        p_rows.push(pos.pooled);
        t_rows.push(txt.pooled);
        if need_local {
            if txt.sep_indices.len() != txt.sentence_count {
                return Err(MamaError::Alignment(format!(
                    "SEP count {} vs sentence count {}",
                    txt.sep_indices.len(),
                    txt.sentence_count
                )));
            }
            let s = g.gather_rows(txt.local, &txt.sep_indices);
            sentence_feats.push(g.l2_normalize_rows(s)?);
            // local alignment reads the primary view only
            let p = g.gather_rows(vis.local, &patch_idx);
            patch_feats.push(g.l2_normalize_rows(p)?);
        }
    }

    let v = g.stack_rows(&v_rows);
    let v = g.l2_normalize_rows(v)?;
    let v_pos = g.stack_rows(&p_rows);
    let v_pos = g.l2_normalize_rows(v_pos)?;
    let t = g.stack_rows(&t_rows);
    let t = g.l2_normalize_rows(t)?;
    Ok(EncodedBatch {
        v,
        v_pos,
        t,
        sentence_feats,
        patch_feats,
    })
}

/// Build the total objective for one batch. Returns the scalar node plus
/// the component nodes used for the logged breakdown.
fn build_loss(
    model: &Model,
    g: &mut Graph,
    leaves: &ParamLeaves,
    batch: &PairBatch,
    config: &TrainConfig,
    step: u64,
    tokenizer: &Tokenizer,
) -> Result<(NodeId, LossBreakdown)> {
    let w = schedule_weight(step, config.delta, config.w_max);
    let enc = encode_batch(model, g, leaves, batch, w != 0.0, tokenizer)?;
    let tau2 = leaves.id(TAU2_PARAM);

    let mut terms: Vec<NodeId> = Vec::new();
    let l_vv = if config.loss_opts.use_vv {
        let n = info_nce_vv_node(
            g,
            enc.v,
            enc.v_pos,
            config.tau1,
            config.loss_opts.vv_negatives,
        );
        terms.push(n);
        g.value(n).item()
    } else {
        0.0
    };
    let vt1 = clip_vt_node(g, enc.v, enc.t, tau2);
    terms.push(vt1);
    let l_vt_primary = g.value(vt1).item();
    let l_vt_positive = if config.loss_opts.symmetric_vt {
        let n = clip_vt_node(g, enc.v_pos, enc.t, tau2);
        terms.push(n);
        g.value(n).item()
    } else {
        0.0
    };
    let (l_local_v, l_local_t) = if w != 0.0 {
        let (cv, ct) = local_scores_node(g, &enc.sentence_feats, &enc.patch_feats);
        let (lv, lt) = local_loss_node(g, cv, ct, config.tau_local);
        let pair = g.add(lv, lt);
        let weighted = g.scale(pair, w / 2.0);
        terms.push(weighted);
        (g.value(lv).item(), g.value(lt).item())
    } else {
        (0.0, 0.0)
    };

    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t);
    }
    let breakdown = LossBreakdown {
        l_vv,
        l_vt_primary,
        l_vt_positive,
        l_local_v,
        l_local_t,
        w,
        total: g.value(total).item(),
    };
    Ok((total, breakdown))
}

/// One forward/backward/update cycle. The state advances in place;
/// a non-finite loss aborts with the diagnostic breakdown.
pub fn train_step(state: &mut TrainState, batch: &PairBatch) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(MamaError::Input("empty batch".into()));
    }
    let tokenizer = Tokenizer::new(state.model.config.vocab_size);
    let mut g = Graph::new();
    let leaves = state.model.leaves(&mut g);
    let (total, breakdown) = build_loss(
        &state.model,
        &mut g,
        &leaves,
        batch,
        &state.config,
        state.step,
        &tokenizer,
    )?;
    if !breakdown.is_finite() {
        return Err(MamaError::Numeric(format!(
            "non-finite loss at step {}: {breakdown:?}",
            state.step
        )));
    }
    debug_assert!(breakdown.identity_gap() < 1e-9);

    let grads = g.backward(total);
    let lr = lr_at(state.step, &state.config)?;

    let trainable: Vec<String> = state
        .model
        .params
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(n, _)| n.to_string())
        .collect();
    let mut updates: Vec<(&str, &mut Mat, Mat)> = Vec::with_capacity(trainable.len());
    let mut borrowed: BTreeMap<&str, Mat> = BTreeMap::new();
    for name in &trainable {
        let grad = grads.of(leaves.id(name)).cloned().unwrap_or_else(|| {
            let p = state.model.params.get(name);
            Mat::zeros(p.rows(), p.cols())
        });
        borrowed.insert(name.as_str(), grad);
    }
    // split borrows: collect (name, &mut value, grad)
    for (name, param) in state.model.params.iter_mut() {
        if let Some(grad) = borrowed.remove(name) {
            updates.push((name, &mut param.value, grad));
        }
    }
    state.optimizer.step(&mut updates, lr);

    // clamp the learnable temperature
    let tau2 = state.model.params.get_mut(TAU2_PARAM);
    let clamped = tau2.item().clamp(TAU2_MIN, TAU2_MAX);
    *tau2 = Mat::scalar(clamped as f32 as f64);

    state.step += 1;
    Ok(breakdown)
}

/// Append-only CSV metrics log.
pub struct MetricsLog<W: Write> {
    out: W,
}

pub const METRICS_HEADER: &str =
    "step,lr,l_vv,l_vt_primary,l_vt_positive,l_local_v,l_local_t,w,total";

impl<W: Write> MetricsLog<W> {
    pub fn new(mut out: W) -> Result<Self> {
        writeln!(out, "{METRICS_HEADER}").map_err(|e| MamaError::io("metrics log", e))?;
        Ok(MetricsLog { out })
    }

    pub fn log(&mut self, step: u64, lr: f64, b: &LossBreakdown) -> Result<()> {
        writeln!(
            self.out,
            "{step},{lr:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}",
            b.l_vv, b.l_vt_primary, b.l_vt_positive, b.l_local_v, b.l_local_t, b.w, b.total
        )
        .map_err(|e| MamaError::io("metrics log", e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out
            .flush()
            .map_err(|e| MamaError::io("metrics log", e))
    }
}

/// Checkpoint save/load; see `checkpoint` module for the on-disk format.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    crate::checkpoint::save(state, path)
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    crate::checkpoint::load(path)
}

/// Encoder configuration echoed in a checkpoint manifest.
pub fn checkpoint_encoder_config(path: &Path) -> Result<EncoderConfig> {
    crate::checkpoint::read_encoder_config(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::caption::{build_structured_caption, CaptionTemplate};
    use crate::multiview::{assemble_batch, AugmentConfig};
    use crate::synth::{generate_corpus, SynthConfig};

    fn tiny_model(seed: u64) -> Model {
        let mut cfg = EncoderConfig::desk();
        cfg.embed_dim = 16;
        cfg.vision_width = 16;
        cfg.text_width = 16;
        cfg.image_size = 16;
        cfg.max_text_tokens = 64;
        cfg.vocab_size = 128;
        Model::init(cfg, seed).unwrap()
    }

    fn tiny_batch(model: &Model, seed: u64, batch: usize) -> PairBatch {
        let config = SynthConfig {
            num_patients: 3,
            studies_per_patient: 1,
            image_size: model.config.image_size,
            ..SynthConfig::default()
        };
        let corpus = generate_corpus(&config).unwrap();
        let studies = crate::data_model::group_studies(&corpus.records);
        let mut rng = Rng::new(seed);
        assemble_batch(
            &studies,
            batch,
            SamplingStrategy::IntraStudy,
            &AugmentConfig::none(),
            &mut rng,
            |r| Ok(corpus.images[&r.image_id].clone()),
            |r, rng| build_structured_caption(r, CaptionTemplate::builtin(), 0.5, rng),
        )
        .unwrap()
    }

    #[test]
    fn lr_schedule_endpoints() {
        let mut cfg = TrainConfig::desk();
        cfg.lr = 1e-3;
        cfg.total_steps = 100;
        cfg.warmup_steps = 10;
        assert_eq!(lr_at(0, &cfg).unwrap(), 0.0);
        assert!((lr_at(10, &cfg).unwrap() - 1e-3).abs() < 1e-18);
        assert!(lr_at(100, &cfg).unwrap().abs() < 1e-18);
        assert!(lr_at(101, &cfg).is_err());
        // closed form mid-schedule
        let got = lr_at(55, &cfg).unwrap();
        let want = 1e-3 * 0.5 * (1.0 + (std::f64::consts::PI * 45.0 / 90.0).cos());
        assert!((got - want).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let model = tiny_model(0);
        let mut cfg = TrainConfig::desk();
        cfg.lr = 1e-9;
        cfg.warmup_steps = 10;
        cfg.total_steps = 20;
        cfg.delta = 0;
        cfg.batch_size = 2;
        let mut state = TrainState::new(model, cfg).unwrap();
        let before = state.model.params.clone();
        let batch = tiny_batch(&state.model, 1, 2);
        // step 0 has lr exactly 0 due to warmup
        let b = train_step(&mut state, &batch).unwrap();
        assert!(b.total.is_finite());
        for (name, p) in state.model.params.iter() {
            assert_eq!(p.value, *before.get(name), "{name} changed at lr 0");
        }
    }

    #[test]
    fn identical_seeds_identical_trajectories() {
        let run = |seed: u64| -> Vec<f64> {
            let model = tiny_model(seed);
            let mut cfg = TrainConfig::desk();
            cfg.batch_size = 2;
            cfg.total_steps = 6;
            cfg.warmup_steps = 1;
            cfg.delta = 3;
            cfg.seed = seed;
            let mut state = TrainState::new(model, cfg).unwrap();
            (0..6)
                .map(|i| {
                    let batch = tiny_batch(&state.model, 100 + i, 2);
                    train_step(&mut state, &batch).unwrap().total
                })
                .collect()
        };
        assert_eq!(run(3), run(3));
        assert_ne!(run(3), run(4));
    }

    #[test]
    fn w_flips_at_delta_in_breakdown() {
        let model = tiny_model(5);
        let mut cfg = TrainConfig::desk();
        cfg.batch_size = 2;
        cfg.total_steps = 4;
        cfg.warmup_steps = 0;
        cfg.delta = 2;
        let mut state = TrainState::new(model, cfg).unwrap();
        let mut ws = Vec::new();
        for i in 0..4 {
            let batch = tiny_batch(&state.model, 200 + i, 2);
            ws.push(train_step(&mut state, &batch).unwrap().w);
        }
        assert_eq!(ws, vec![0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn frozen_base_text_weights_never_move() {
        let model = tiny_model(6);
        assert!(model.config.lora_rank > 0);
        let frozen: Vec<(String, Mat)> = model
            .params
            .iter()
            .filter(|(_, p)| !p.trainable)
            .map(|(n, p)| (n.to_string(), p.value.clone()))
            .collect();
        assert!(!frozen.is_empty());
        let mut cfg = TrainConfig::desk();
        cfg.batch_size = 2;
        cfg.total_steps = 5;
        cfg.warmup_steps = 0;
        cfg.delta = 1;
        let mut state = TrainState::new(model, cfg).unwrap();
        for i in 0..5 {
            let batch = tiny_batch(&state.model, 300 + i, 2);
            train_step(&mut state, &batch).unwrap();
        }
        for (name, before) in frozen {
            assert_eq!(
                *state.model.params.get(&name),
                before,
                "frozen {name} moved"
            );
        }
        // but adapters did move
        let a = state.model.params.get("txt.blk0.wq.lora_a");
        let fresh = tiny_model(6);
        assert_ne!(*a, *fresh.params.get("txt.blk0.wq.lora_a"));
    }

    #[test]
    fn tau2_stays_clamped_and_updates() {
        let model = tiny_model(7);
        let mut cfg = TrainConfig::desk();
        cfg.batch_size = 2;
        cfg.total_steps = 5;
        cfg.warmup_steps = 0;
        cfg.delta = 5;
        cfg.lr = 0.05;
        let mut state = TrainState::new(model, cfg).unwrap();
        let before = state.tau2();
        for i in 0..5 {
            let batch = tiny_batch(&state.model, 400 + i, 2);
            train_step(&mut state, &batch).unwrap();
            let tau = state.tau2();
            assert!((TAU2_MIN..=TAU2_MAX).contains(&tau));
        }
        assert_ne!(state.tau2(), before, "tau2 should receive gradient");
    }

    #[test]
    fn metrics_log_format() {
        let mut buf = Vec::new();
        {
            let mut log = MetricsLog::new(&mut buf).unwrap();
            let b = LossBreakdown {
                l_vv: 1.0,
                l_vt_primary: 2.0,
                l_vt_positive: 3.0,
                l_local_v: 0.0,
                l_local_t: 0.0,
                w: 0.0,
                total: 6.0,
            };
            log.log(0, 1e-3, &b).unwrap();
            log.flush().unwrap();
        }
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), METRICS_HEADER);
        let row = lines.next().unwrap();
        assert!(row.starts_with("0,1.000000000e-3,"), "{row}");
        assert_eq!(row.split(',').count(), 9);
    }
}
