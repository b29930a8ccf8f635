//! Evaluation harness: zero-shot classification from class prompts, linear
//! probing on frozen embeddings, full fine-tuning of the vision tower, and
//! the metric suite for imbalanced problems.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::caption::{
    build_structured_caption_opts, split_sentences, Caption, CaptionStyle, CaptionTemplate,
    SegmentName, StructuredOpts,
};
use crate::data_model::{ImageRecord, Study};
use crate::encoder::l2_normalize;
use crate::error::{MamaError, Result};
use crate::graph::Graph;
use crate::image::GrayImage;
use crate::mat::Mat;
use crate::model::Model;
use crate::multiview::{augment, AugmentConfig};
use crate::rng::Rng;
use crate::tokenizer::Tokenizer;
use crate::trainer::{lr_at, Optimizer, OptimizerKind, TrainConfig};

/// How zero-shot class prompts are built.
#[derive(Debug, Clone, PartialEq)]
pub enum PromptStyle {
    /// Structured template with the class label in the findings slot and
    /// the other clinical sections omitted. `fill_meta` controls whether
    /// the record's meta sections are kept.
    Structured { fill_meta: bool },
    /// Single sentence "a mammogram with {label}."
    ClipStyle,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZeroShotSpec {
    pub class_labels: Vec<String>,
    pub prompt_style: PromptStyle,
    pub temperature_for_probs: f64,
}

impl ZeroShotSpec {
    pub fn validate(&self) -> Result<()> {
        if self.class_labels.len() < 2 {
            return Err(MamaError::Spec("need at least 2 class labels".into()));
        }
        if !(self.temperature_for_probs > 0.0 && self.temperature_for_probs.is_finite()) {
            return Err(MamaError::Spec(format!(
                "temperature_for_probs {} must be positive",
                self.temperature_for_probs
            )));
        }
        Ok(())
    }
}

/// Classification quality summary.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub balanced_accuracy: f64,
    pub auc: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    /// One entry per class; absent when the class cannot be scored.
    pub per_class_recall: Vec<Option<f64>>,
    /// Rows are true classes, columns predictions.
    pub confusion: Vec<Vec<usize>>,
    pub warnings: Vec<String>,
}

impl EvalReport {
    /// Build the report from predictions and per-class probabilities.
    /// `scorable` marks classes whose recall may enter the balanced
    /// accuracy (e.g. classes seen during probe training).
    pub fn from_predictions(
        labels: &[usize],
        predictions: &[usize],
        probs: &Mat,
        num_classes: usize,
        scorable: &[bool],
        mut warnings: Vec<String>,
    ) -> Result<EvalReport> {
        if labels.len() != predictions.len() || labels.is_empty() {
            return Err(MamaError::Input("labels/predictions mismatch".into()));
        }
        let mut confusion = vec![vec![0usize; num_classes]; num_classes];
        for (&y, &p) in labels.iter().zip(predictions) {
            confusion[y][p] += 1;
        }
        let mut per_class_recall = vec![None; num_classes];
        for k in 0..num_classes {
            let support: usize = confusion[k].iter().sum();
            if support == 0 {
                continue;
            }
            if !scorable[k] {
                warnings.push(format!(
                    "class {k} untrained; recall marked absent and excluded from bACC"
                ));
                continue;
            }
            per_class_recall[k] = Some(confusion[k][k] as f64 / support as f64);
        }
        let live: Vec<f64> = per_class_recall.iter().flatten().copied().collect();
        if live.is_empty() {
            return Err(MamaError::Input("no scorable class has support".into()));
        }
        let balanced_accuracy = live.iter().sum::<f64>() / live.len() as f64;
        let auc = auc(probs, labels);
        let (sensitivity, specificity) = if num_classes == 2 {
            sensitivity_specificity(&confusion)
        } else {
            (None, None)
        };
        Ok(EvalReport {
            balanced_accuracy,
            auc,
            sensitivity,
            specificity,
            per_class_recall,
            confusion,
            warnings,
        })
    }

    /// Flat JSON rendering, one key per line.
    pub fn render(&self) -> String {
        fn num(v: Option<f64>) -> String {
            v.map_or("null".to_string(), |x| format!("{x}"))
        }
        let mut out = String::from("{\n");
        let _ = writeln!(out, "  \"balanced_accuracy\": {},", self.balanced_accuracy);
        let _ = writeln!(out, "  \"auc\": {},", num(self.auc));
        let _ = writeln!(out, "  \"sensitivity\": {},", num(self.sensitivity));
        let _ = writeln!(out, "  \"specificity\": {},", num(self.specificity));
        let _ = writeln!(out, "  \"num_classes\": {},", self.per_class_recall.len());
        for (k, r) in self.per_class_recall.iter().enumerate() {
            let _ = writeln!(out, "  \"recall_{k}\": {},", num(*r));
        }
        for (k, row) in self.confusion.iter().enumerate() {
            let _ = writeln!(out, "  \"support_{k}\": {},", row.iter().sum::<usize>());
        }
        for (i, w) in self.warnings.iter().enumerate() {
            let _ = writeln!(out, "  \"warning_{i}\": \"{}\",", w.replace('"', "'"));
        }
        let _ = writeln!(out, "  \"samples\": {}", self.total());
        out.push_str("}\n");
        out
    }

    pub fn confusion_csv(&self) -> String {
        let mut out = String::new();
        for row in &self.confusion {
            let cells: Vec<String> = row.iter().map(|c| c.to_string()).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, report_path: &Path, confusion_path: &Path) -> Result<()> {
        std::fs::write(report_path, self.render())
            .map_err(|e| MamaError::io(report_path.display().to_string(), e))?;
        std::fs::write(confusion_path, self.confusion_csv())
            .map_err(|e| MamaError::io(confusion_path.display().to_string(), e))
    }

    pub fn total(&self) -> usize {
        self.confusion.iter().map(|r| r.iter().sum::<usize>()).sum()
    }
}

/// Mean of diagonal/row-sum over classes with nonzero support.
pub fn balanced_accuracy(confusion: &[Vec<usize>]) -> Result<f64> {
    let total: usize = confusion.iter().map(|r| r.iter().sum::<usize>()).sum();
    if total == 0 {
        return Err(MamaError::Input("empty confusion matrix".into()));
    }
    let mut recalls = Vec::new();
    for (k, row) in confusion.iter().enumerate() {
        if row.len() != confusion.len() {
            return Err(MamaError::Shape("confusion matrix must be square".into()));
        }
        let support: usize = row.iter().sum();
        if support > 0 {
            recalls.push(row[k] as f64 / support as f64);
        }
    }
    Ok(recalls.iter().sum::<f64>() / recalls.len() as f64)
}

/// Mann-Whitney AUC with midrank tie handling.
pub fn binary_auc(positive: &[f64], negative: &[f64]) -> Option<f64> {
    if positive.is_empty() || negative.is_empty() {
        return None;
    }
    let mut all: Vec<(f64, bool)> = positive
        .iter()
        .map(|&s| (s, true))
        .chain(negative.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // ranks are 1-based; tied scores share the midrank
        let midrank = (i + 1 + j) as f64 / 2.0;
        for item in &all[i..j] {
            if item.1 {
                rank_sum_pos += midrank;
            }
        }
        i = j;
    }
    let np = positive.len() as f64;
    let nn = negative.len() as f64;
    Some((rank_sum_pos - np * (np + 1.0) / 2.0) / (np * nn))
}

/// Binary: Mann-Whitney on the positive-class column. Multiclass:
/// macro-averaged one-vs-rest over classes present. None when fewer than
/// two classes are present.
pub fn auc(scores: &Mat, labels: &[usize]) -> Option<f64> {
    let k = scores.cols();
    let present: Vec<usize> = (0..k)
        .filter(|class| labels.iter().any(|l| l == class))
        .collect();
    if present.len() < 2 {
        return None;
    }
    let ovr = |class: usize| -> Option<f64> {
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for (i, &l) in labels.iter().enumerate() {
            if l == class {
                pos.push(scores.at(i, class));
            } else {
                neg.push(scores.at(i, class));
            }
        }
        binary_auc(&pos, &neg)
    };
    if k == 2 {
        return ovr(1);
    }
    let values: Vec<f64> = present.iter().filter_map(|&c| ovr(c)).collect();
    if values.is_empty() {
        return None;
    }
    Some(values.iter().sum::<f64>() / values.len() as f64)
}

/// (TP/(TP+FN), TN/(TN+FP)) from a 2x2 confusion with class 1 positive.
pub fn sensitivity_specificity(confusion: &[Vec<usize>]) -> (Option<f64>, Option<f64>) {
    assert_eq!(confusion.len(), 2, "binary confusion expected");
    let (tn, fp) = (confusion[0][0], confusion[0][1]);
    let (fn_, tp) = (confusion[1][0], confusion[1][1]);
    let sens = (tp + fn_ > 0).then(|| tp as f64 / (tp + fn_) as f64);
    let spec = (tn + fp > 0).then(|| tn as f64 / (tn + fp) as f64);
    (sens, spec)
}

/// Argmax with ties broken toward the lowest class index.
pub fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0usize;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Cosine scores of each image row against its own per-sample prompt set.
pub fn score_images_against_prompts(images: &Mat, prompts: &[Mat]) -> Result<Mat> {
    if images.rows() != prompts.len() || prompts.is_empty() {
        return Err(MamaError::Input(format!(
            "{} images vs {} prompt sets",
            images.rows(),
            prompts.len()
        )));
    }
    let k = prompts[0].rows();
    let mut scores = Mat::zeros(images.rows(), k);
    for i in 0..images.rows() {
        if prompts[i].rows() != k || prompts[i].cols() != images.cols() {
            return Err(MamaError::Shape(format!(
                "prompt set {i} has shape {:?}",
                prompts[i].shape()
            )));
        }
        for class in 0..k {
            scores.set(
                i,
                class,
                crate::mat::dot(images.row(i), prompts[i].row(class)),
            );
        }
    }
    Ok(scores)
}

/// Row softmax at a temperature.
pub fn softmax_scores(scores: &Mat, temperature: f64) -> Mat {
    let mut g = Graph::new();
    let s = g.input(scores.scale(1.0 / temperature));
    let p = g.softmax_rows(s, None);
    g.value(p).clone()
}

/// The in-memory evaluation corpus shared by the three settings.
pub struct EvalDataset {
    pub train_studies: Vec<Study>,
    pub test_records: Vec<ImageRecord>,
    pub images: BTreeMap<String, GrayImage>,
    /// Class index per image id.
    pub labels: BTreeMap<String, usize>,
    pub num_classes: usize,
}

impl EvalDataset {
    fn label_of(&self, record: &ImageRecord) -> Result<usize> {
        self.labels
            .get(&record.image_id)
            .copied()
            .ok_or_else(|| MamaError::Input(format!("no label for {}", record.image_id)))
    }

    fn image_of(&self, record: &ImageRecord) -> Result<&GrayImage> {
        self.images
            .get(&record.image_id)
            .ok_or_else(|| MamaError::Input(format!("no image for {}", record.image_id)))
    }
}

/// Normalized global embeddings, one row per record.
pub fn embed_images(model: &Model, dataset: &EvalDataset, records: &[ImageRecord]) -> Result<Mat> {
    let mut rows = Mat::zeros(records.len(), model.config.embed_dim);
    for (i, r) in records.iter().enumerate() {
        let set = model.encode_image(dataset.image_of(r)?)?;
        let v = l2_normalize(&set.global)?;
        rows.row_mut(i).copy_from_slice(&v);
    }
    Ok(rows)
}

/// Build the prompt caption for one record and class label.
pub fn build_prompt(
    record: &ImageRecord,
    template: &CaptionTemplate,
    style: &PromptStyle,
    label: &str,
) -> Result<Caption> {
    if label.trim().is_empty() {
        return Err(MamaError::Spec("empty class label".into()));
    }
    match style {
        PromptStyle::Structured { fill_meta } => {
            if !template.placeholders()?.contains("findings") {
                return Err(MamaError::Spec(
                    "template has no findings placeholder to hold the class label".into(),
                ));
            }
            let mut omit = vec![
                SegmentName::Composition,
                SegmentName::Impression,
                SegmentName::Assessment,
            ];
            if !*fill_meta {
                omit.extend([
                    SegmentName::Procedure,
                    SegmentName::PatientMeta,
                    SegmentName::ImageMeta,
                ]);
            }
            let opts = StructuredOpts {
                omit_segments: omit,
                override_meta: vec![("findings".into(), label.to_string())],
            };
            let mut rng = Rng::new(0);
            build_structured_caption_opts(record, template, 0.0, &mut rng, &opts)
        }
        PromptStyle::ClipStyle => {
            let text = format!("a mammogram with {label}.");
            let sentence_spans = split_sentences(&text);
            Ok(Caption {
                text,
                sentence_spans,
                masked_keywords: Default::default(),
                style: CaptionStyle::ClipStyle,
            })
        }
    }
}

pub struct ZeroShotOutput {
    pub predictions: Vec<usize>,
    /// Raw cosine scores, N x K.
    pub scores: Mat,
    pub report: EvalReport,
}

/// Zero-shot classification over the test records.
pub fn zero_shot_classify(
    model: &Model,
    dataset: &EvalDataset,
    template: &CaptionTemplate,
    spec: &ZeroShotSpec,
) -> Result<ZeroShotOutput> {
    spec.validate()?;
    if dataset.test_records.is_empty() {
        return Err(MamaError::Input("no test records".into()));
    }
    let tokenizer = Tokenizer::new(model.config.vocab_size);
    let images = embed_images(model, dataset, &dataset.test_records)?;
    let mut prompt_embs = Vec::with_capacity(dataset.test_records.len());
    for record in &dataset.test_records {
        let mut rows = Mat::zeros(spec.class_labels.len(), model.config.embed_dim);
        for (k, label) in spec.class_labels.iter().enumerate() {
            let caption = build_prompt(record, template, &spec.prompt_style, label)?;
            let tokens = tokenizer.tokenize(&caption, model.config.max_text_tokens);
            let set = model.encode_tokens(&tokens)?;
            let t = l2_normalize(&set.global)?;
            rows.row_mut(k).copy_from_slice(&t);
        }
        prompt_embs.push(rows);
    }
    let scores = score_images_against_prompts(&images, &prompt_embs)?;
    let predictions: Vec<usize> = (0..scores.rows())
        .map(|i| argmax_lowest(scores.row(i)))
        .collect();
    let probs = softmax_scores(&scores, spec.temperature_for_probs);
    let labels: Vec<usize> = dataset
        .test_records
        .iter()
        .map(|r| dataset.label_of(r))
        .collect::<Result<_>>()?;
    let report = EvalReport::from_predictions(
        &labels,
        &predictions,
        &probs,
        spec.class_labels.len(),
        &vec![true; spec.class_labels.len()],
        Vec::new(),
    )?;
    Ok(ZeroShotOutput {
        predictions,
        scores,
        report,
    })
}

/// Deterministic full-batch softmax regression.
pub fn train_softmax_head(
    x: &Mat,
    labels: &[usize],
    num_classes: usize,
    steps: u64,
    lr: f64,
    l2: f64,
) -> (Mat, Mat) {
    let (n, d) = x.shape();
    let mut w = Mat::zeros(d, num_classes);
    let mut b = Mat::zeros(1, num_classes);
    for _ in 0..steps {
        let mut logits = x.matmul(&w);
        for i in 0..n {
            for k in 0..num_classes {
                let v = logits.at(i, k) + b.at(0, k);
                logits.set(i, k, v);
            }
        }
        let probs = softmax_scores(&logits, 1.0);
        // grad of mean cross-entropy
        let mut grad = probs;
        for (i, &y) in labels.iter().enumerate() {
            let v = grad.at(i, y) - 1.0;
            grad.set(i, y, v);
        }
        let scale = 1.0 / n as f64;
        let gw = x.matmul_tn(&grad).scale(scale).add(&w.scale(l2));
        let mut gb = Mat::zeros(1, num_classes);
        for i in 0..n {
            for k in 0..num_classes {
                let v = gb.at(0, k) + grad.at(i, k) * scale;
                gb.set(0, k, v);
            }
        }
        w = w.sub(&gw.scale(lr));
        b = b.sub(&gb.scale(lr));
    }
    (w, b)
}

fn head_predictions(x: &Mat, w: &Mat, b: &Mat) -> (Vec<usize>, Mat) {
    let mut logits = x.matmul(w);
    for i in 0..logits.rows() {
        for k in 0..logits.cols() {
            let v = logits.at(i, k) + b.at(0, k);
            logits.set(i, k, v);
        }
    }
    let probs = softmax_scores(&logits, 1.0);
    let preds = (0..probs.rows())
        .map(|i| argmax_lowest(probs.row(i)))
        .collect();
    (preds, probs)
}

#[derive(Debug, Clone, Copy)]
pub struct ProbeConfig {
    pub steps: u64,
    pub lr: f64,
    pub l2: f64,
    pub seed: u64,
}

/// Linear probe on frozen embeddings over a training fraction.
pub fn linear_probe(
    model: &Model,
    dataset: &EvalDataset,
    fraction: f64,
    probe: &ProbeConfig,
) -> Result<EvalReport> {
    let subset =
        crate::data_model::subsample_fraction(&dataset.train_studies, fraction, probe.seed)?;
    let train_records: Vec<ImageRecord> = subset
        .iter()
        .flat_map(|s| s.images.iter().cloned())
        .collect();
    if train_records.is_empty() {
        return Err(MamaError::Input("probe training set is empty".into()));
    }
    let x = embed_images(model, dataset, &train_records)?;
    let y: Vec<usize> = train_records
        .iter()
        .map(|r| dataset.label_of(r))
        .collect::<Result<_>>()?;
    let (w, b) = train_softmax_head(&x, &y, dataset.num_classes, probe.steps, probe.lr, probe.l2);

    let scorable: Vec<bool> = (0..dataset.num_classes).map(|k| y.contains(&k)).collect();
    let test_x = embed_images(model, dataset, &dataset.test_records)?;
    let (preds, probs) = head_predictions(&test_x, &w, &b);
    let test_y: Vec<usize> = dataset
        .test_records
        .iter()
        .map(|r| dataset.label_of(r))
        .collect::<Result<_>>()?;
    EvalReport::from_predictions(
        &test_y,
        &preds,
        &probs,
        dataset.num_classes,
        &scorable,
        Vec::new(),
    )
}

#[derive(Debug, Clone)]
pub struct FinetuneConfig {
    pub steps: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub warmup_steps: u64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub augment: AugmentConfig,
}

/// Fine-tune the whole vision tower plus a linear head; the text encoder is
/// untouched.
pub fn full_finetune(
    model: &Model,
    dataset: &EvalDataset,
    ft: &FinetuneConfig,
) -> Result<EvalReport> {
    let train_records: Vec<ImageRecord> = dataset
        .train_studies
        .iter()
        .flat_map(|s| s.images.iter().cloned())
        .collect();
    if train_records.is_empty() {
        return Err(MamaError::Input("fine-tune training set is empty".into()));
    }

    let mut tuned = model.clone();
    let d = tuned.config.embed_dim;
    tuned
        .params
        .insert("head.w", Mat::zeros(d, dataset.num_classes), true);
    tuned
        .params
        .insert("head.b", Mat::zeros(1, dataset.num_classes), true);

    // schedule shim reusing the warmup + cosine form
    let sched = TrainConfig {
        lr: ft.lr,
        total_steps: ft.steps,
        warmup_steps: ft.warmup_steps.min(ft.steps),
        delta: 0,
        batch_size: ft.batch_size.max(1),
        optimizer: ft.optimizer,
        weight_decay: ft.weight_decay,
        ..TrainConfig::full_scale()
    };
    let mut optimizer = Optimizer::new(&sched);
    let mut rng = Rng::new(ft.seed).derive(0x66_74);

    for step in 0..ft.steps {
        let mut g = Graph::new();
        let leaves = tuned.leaves(&mut g);
        let mut rows = Vec::with_capacity(sched.batch_size);
        let mut ys = Vec::with_capacity(sched.batch_size);
        for _ in 0..sched.batch_size {
            let record = &train_records[rng.below(train_records.len())];
            let img = augment(dataset.image_of(record)?, &mut rng, &ft.augment);
            let vis = tuned.vision_forward(&mut g, &leaves, &img)?;
            rows.push(vis.pooled);
            ys.push(dataset.label_of(record)?);
        }
        let x = g.stack_rows(&rows);
        let x = g.l2_normalize_rows(x)?;
        let logits = g.matmul(x, leaves.id("head.w"));
        let logits = g.add_row_broadcast(logits, leaves.id("head.b"));
        let logp = g.log_softmax_rows(logits, None);
        // one-hot selector puts logp[i, y_i] on the diagonal
        let onehot = g.input(Mat::from_fn(dataset.num_classes, ys.len(), |k, i| {
            f64::from(ys[i] == k)
        }));
        let picked = g.matmul(logp, onehot);
        let mean = g.diag_mean(picked, 0);
        let loss = g.scale(mean, -1.0);
        if !g.value(loss).item().is_finite() {
            return Err(MamaError::Numeric(format!(
                "non-finite fine-tune loss at step {step}"
            )));
        }
        let grads = g.backward(loss);
        let lr = lr_at(step, &sched)?;
        let names: Vec<String> = tuned
            .params
            .iter()
            .filter(|(n, p)| p.trainable && (n.starts_with("vis.") || n.starts_with("head.")))
            .map(|(n, _)| n.to_string())
            .collect();
        let mut grad_map: BTreeMap<&str, Mat> = BTreeMap::new();
        for name in &names {
            if let Some(gm) = grads.of(leaves.id(name)) {
                grad_map.insert(name.as_str(), gm.clone());
            }
        }
        let mut updates: Vec<(&str, &mut Mat, Mat)> = Vec::new();
        for (name, param) in tuned.params.iter_mut() {
            if let Some(gm) = grad_map.remove(name) {
                updates.push((name, &mut param.value, gm));
            }
        }
        optimizer.step(&mut updates, lr);
    }

    // text tower untouched by construction: only vis.* and head.* updated
    let test_x = embed_images(&tuned, dataset, &dataset.test_records)?;
    let w = tuned.params.get("head.w").clone();
    let b = tuned.params.get("head.b").clone();
    let (preds, probs) = head_predictions(&test_x, &w, &b);
    let test_y: Vec<usize> = dataset
        .test_records
        .iter()
        .map(|r| dataset.label_of(r))
        .collect::<Result<_>>()?;
    EvalReport::from_predictions(
        &test_y,
        &preds,
        &probs,
        dataset.num_classes,
        &vec![true; dataset.num_classes],
        Vec::new(),
    )
}
