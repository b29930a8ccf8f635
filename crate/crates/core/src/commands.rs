//! Pipeline entry points behind the CLI: dataset synthesis, caption dumps,
//! pre-training, the three evaluation modes, and similarity-map export.
//! Every command echoes the effective configuration into its output
//! directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::caption::{
    build_clip_style_caption, build_structured_caption, build_tabular_caption, Caption,
    CaptionStyle, CaptionTemplate,
};
use crate::config::RunConfig;
use crate::data_model::{group_studies, parse_records, split_patients, CsvSchema, Study};
use crate::encoder::{select_patch_features, select_sentence_features};
use crate::error::{MamaError, Result};
use crate::eval::{
    full_finetune, linear_probe, zero_shot_classify, EvalDataset, EvalReport, FinetuneConfig,
    ProbeConfig, PromptStyle, ZeroShotSpec,
};
use crate::image::{load_image, GrayImage};
use crate::losses::correspondence_matrix;
use crate::model::Model;
use crate::multiview::assemble_batch;
use crate::rng::Rng;
use crate::simmap::{export_map, normalize_unit, sentence_map, MapFormat};
use crate::synth::{generate_dataset, load_ground_truth, PlantedTruth, CLASS_FINDINGS};
use crate::tokenizer::Tokenizer;
use crate::trainer::{load_checkpoint, lr_at, save_checkpoint, train_step, MetricsLog, TrainState};

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| MamaError::io(dir.display().to_string(), e))
}

fn echo_config(config: &RunConfig, dir: &Path) -> Result<()> {
    let path = dir.join("config.txt");
    fs::write(&path, config.to_text()).map_err(|e| MamaError::io(path.display().to_string(), e))
}

/// Generate the synthetic dataset into `out_dir`.
pub fn cmd_synth(config: &RunConfig, out_dir: &Path) -> Result<usize> {
    config.validate()?;
    ensure_dir(out_dir)?;
    let corpus = generate_dataset(&config.synth, out_dir)?;
    echo_config(config, out_dir)?;
    Ok(corpus.records.len())
}

/// Everything read back from a dataset directory.
pub struct LoadedData {
    pub train: Vec<Study>,
    pub val: Vec<Study>,
    pub test: Vec<Study>,
    pub images: BTreeMap<String, GrayImage>,
    pub truth: BTreeMap<String, PlantedTruth>,
    pub num_classes: usize,
}

impl LoadedData {
    pub fn eval_dataset(&self) -> EvalDataset {
        EvalDataset {
            train_studies: self.train.clone(),
            test_records: self
                .test
                .iter()
                .flat_map(|s| s.images.iter().cloned())
                .collect(),
            images: self.images.clone(),
            labels: self
                .truth
                .iter()
                .map(|(id, t)| (id.clone(), t.class))
                .collect(),
            num_classes: self.num_classes,
        }
    }
}

/// Read records, images and ground truth; split by patient.
pub fn load_dataset(data_dir: &Path, config: &RunConfig) -> Result<LoadedData> {
    let csv_path = data_dir.join("records.csv");
    let text = fs::read_to_string(&csv_path)
        .map_err(|e| MamaError::io(csv_path.display().to_string(), e))?;
    let records = parse_records(&text, &CsvSchema::default())?;
    let studies = group_studies(&records);
    let (train, val, test) = split_patients(&studies, &config.split)?;

    let mut images = BTreeMap::new();
    for r in &records {
        let path = data_dir.join(&r.image_path);
        images.insert(r.image_id.clone(), load_image(&path)?);
    }
    let truth_path = data_dir.join("ground_truth.csv");
    let truth = if truth_path.exists() {
        load_ground_truth(&truth_path)?
    } else {
        BTreeMap::new()
    };
    let num_classes = truth
        .values()
        .map(|t| t.class + 1)
        .max()
        .unwrap_or(config.synth.num_classes)
        .max(2);
    Ok(LoadedData {
        train,
        val,
        test,
        images,
        truth,
        num_classes,
    })
}

pub fn build_caption(
    record: &crate::data_model::ImageRecord,
    template: &CaptionTemplate,
    style: CaptionStyle,
    mask_prob: f64,
    rng: &mut Rng,
) -> Result<Caption> {
    match style {
        CaptionStyle::Structured => build_structured_caption(record, template, mask_prob, rng),
        CaptionStyle::ClipStyle => Ok(build_clip_style_caption(record)),
        CaptionStyle::Tabular => Ok(build_tabular_caption(record)),
    }
}

/// Dump one caption per record as CSV (image_id, style, text).
pub fn cmd_captions(
    config: &RunConfig,
    data_dir: &Path,
    out_path: &Path,
    template: &CaptionTemplate,
) -> Result<usize> {
    config.validate()?;
    let data = load_dataset(data_dir, config)?;
    let mut rng = Rng::new(config.train.seed).derive(0x6361_7074);
    let mut w = csv::Writer::from_path(out_path)
        .map_err(|e| MamaError::Schema(format!("cannot write {}: {e}", out_path.display())))?;
    w.write_record(["image_id", "style", "text"])
        .map_err(|e| MamaError::Schema(format!("csv write: {e}")))?;
    let mut count = 0usize;
    for study in data.train.iter().chain(&data.val).chain(&data.test) {
        for record in &study.images {
            let caption = build_caption(
                record,
                template,
                config.caption.style,
                config.caption.mask_prob,
                &mut rng,
            )?;
            w.write_record([
                record.image_id.as_str(),
                config.caption.style.as_str(),
                caption.text.as_str(),
            ])
            .map_err(|e| MamaError::Schema(format!("csv write: {e}")))?;
            count += 1;
        }
    }
    w.flush()
        .map_err(|e| MamaError::io(out_path.display().to_string(), e))?;
    Ok(count)
}

pub struct PretrainOutput {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub final_state: TrainState,
}

/// Run pre-training over the train split, logging metrics per step and
/// saving the final checkpoint. `resume_from` continues a saved state;
/// `stop_after` checkpoints mid-schedule (the metrics log covers only the
/// steps this invocation ran).
pub fn cmd_pretrain(
    config: &RunConfig,
    data_dir: &Path,
    out_dir: &Path,
    template: &CaptionTemplate,
    resume_from: Option<&Path>,
    stop_after: Option<u64>,
) -> Result<PretrainOutput> {
    config.validate()?;
    ensure_dir(out_dir)?;
    let data = load_dataset(data_dir, config)?;
    if data.train.is_empty() {
        return Err(MamaError::Input("train split is empty".into()));
    }

    let mut state = match resume_from {
        Some(path) => load_checkpoint(path)?,
        None => {
            let model = Model::init(config.encoder.clone(), config.train.seed)?;
            TrainState::new(model, config.train.clone())?
        }
    };

    let metrics_path = out_dir.join("metrics.csv");
    let mut rows: Vec<(u64, f64, crate::losses::LossBreakdown)> = Vec::new();

    let stop = stop_after
        .unwrap_or(state.config.total_steps)
        .min(state.config.total_steps);
    while state.step < stop {
        let step = state.step;
        let lr = lr_at(step, &state.config)?;
        let strategy = state.config.strategy;
        let batch_size = state.config.batch_size;
        let mask_prob = state.config.mask_prob;
        let style = config.caption.style;
        let batch = {
            let images = &data.images;
            assemble_batch(
                &data.train,
                batch_size,
                strategy,
                &config.augment,
                &mut state.rng,
                |r| {
                    images
                        .get(&r.image_id)
                        .cloned()
                        .ok_or_else(|| MamaError::Input(format!("no image for {}", r.image_id)))
                },
                |r, rng| build_caption(r, template, style, mask_prob, rng),
            )?
        };
        let breakdown = train_step(&mut state, &batch)?;
        rows.push((step, lr, breakdown));
    }

    // the log is written in one pass so an aborted run leaves no stub
    let file = fs::File::create(&metrics_path)
        .map_err(|e| MamaError::io(metrics_path.display().to_string(), e))?;
    let mut log = MetricsLog::new(std::io::BufWriter::new(file))?;
    for (step, lr, b) in &rows {
        log.log(*step, *lr, b)?;
    }
    log.flush()?;

    let checkpoint = out_dir.join("checkpoint");
    save_checkpoint(&state, &checkpoint)?;
    echo_config(config, out_dir)?;
    Ok(PretrainOutput {
        checkpoint,
        metrics: metrics_path,
        final_state: state,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    ZeroShot,
    Probe,
    Finetune,
}

impl EvalMode {
    pub fn parse(s: &str) -> Option<EvalMode> {
        match s.trim().to_ascii_lowercase().as_str() {
            "zeroshot" | "zero-shot" => Some(EvalMode::ZeroShot),
            "probe" | "linear-probe" => Some(EvalMode::Probe),
            "finetune" | "full-finetune" => Some(EvalMode::Finetune),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            EvalMode::ZeroShot => "zeroshot",
            EvalMode::Probe => "probe",
            EvalMode::Finetune => "finetune",
        }
    }
}

/// Class labels for the synthetic task: the findings vocabulary.
pub fn class_labels(num_classes: usize) -> Vec<String> {
    CLASS_FINDINGS
        .iter()
        .take(num_classes)
        .map(|s| s.to_string())
        .collect()
}

/// Evaluate a checkpoint in one mode, writing the report and confusion
/// matrix into `out_dir`.
pub fn cmd_eval(
    config: &RunConfig,
    data_dir: &Path,
    checkpoint: &Path,
    out_dir: &Path,
    mode: EvalMode,
    template: &CaptionTemplate,
) -> Result<EvalReport> {
    config.validate()?;
    ensure_dir(out_dir)?;
    let data = load_dataset(data_dir, config)?;
    if data.truth.is_empty() {
        return Err(MamaError::Input(
            "dataset has no ground_truth.csv; evaluation needs labels".into(),
        ));
    }
    let model = crate::checkpoint::load_model(checkpoint)?;
    let dataset = data.eval_dataset();

    let (report, stem) = match mode {
        EvalMode::ZeroShot => {
            let spec = ZeroShotSpec {
                class_labels: class_labels(dataset.num_classes),
                prompt_style: PromptStyle::Structured { fill_meta: true },
                temperature_for_probs: config.eval.zeroshot_temperature,
            };
            let out = zero_shot_classify(&model, &dataset, template, &spec)?;
            (out.report, "zeroshot".to_string())
        }
        EvalMode::Probe => {
            let probe = ProbeConfig {
                steps: config.eval.probe_steps,
                lr: config.eval.probe_lr,
                l2: config.eval.probe_l2,
                seed: config.eval.eval_seed,
            };
            let report = linear_probe(&model, &dataset, config.eval.fraction, &probe)?;
            (report, format!("probe_{}", config.eval.fraction))
        }
        EvalMode::Finetune => {
            let ft = FinetuneConfig {
                steps: config.eval.ft_steps,
                lr: config.eval.ft_lr,
                weight_decay: config.eval.ft_weight_decay,
                batch_size: config.eval.ft_batch_size,
                warmup_steps: config.eval.ft_warmup_steps,
                optimizer: config.eval.ft_optimizer,
                seed: config.eval.eval_seed,
                augment: config.augment,
            };
            let report = full_finetune(&model, &dataset, &ft)?;
            (report, "finetune".to_string())
        }
    };
    report.write(
        &out_dir.join(format!("report_{stem}.json")),
        &out_dir.join(format!("confusion_{stem}.csv")),
    )?;
    echo_config(config, out_dir)?;
    Ok(report)
}

/// Export normalized similarity maps for the first `count` test images.
/// Returns the written file paths.
pub fn cmd_simmap(
    config: &RunConfig,
    data_dir: &Path,
    checkpoint: &Path,
    out_dir: &Path,
    sentence_index: usize,
    format: MapFormat,
    count: usize,
    template: &CaptionTemplate,
) -> Result<Vec<PathBuf>> {
    config.validate()?;
    ensure_dir(out_dir)?;
    let data = load_dataset(data_dir, config)?;
    let model = crate::checkpoint::load_model(checkpoint)?;
    let tokenizer = Tokenizer::new(model.config.vocab_size);
    let grid = (model.config.patch_rows, model.config.patch_cols);

    let mut written = Vec::new();
    let records: Vec<_> = data
        .test
        .iter()
        .flat_map(|s| s.images.iter().cloned())
        .take(count)
        .collect();
    if records.is_empty() {
        return Err(MamaError::Input("no test images for simmap".into()));
    }
    for record in &records {
        let image = &data.images[&record.image_id];
        let mut rng = Rng::new(0);
        let caption = build_structured_caption(record, template, 0.0, &mut rng)?;
        let tokens = tokenizer.tokenize(&caption, model.config.max_text_tokens);
        let text_set = model.encode_tokens(&tokens)?;
        let image_set = model.encode_image(image)?;
        let s = select_sentence_features(
            &text_set.local,
            &text_set.token_roles,
            tokens.sentence_count,
        )?;
        let p = select_patch_features(&image_set.local, &image_set.token_roles)?;
        let c = correspondence_matrix(&s, &p)?;
        let sentence_text = caption
            .sentences()
            .nth(sentence_index)
            .unwrap_or_default()
            .to_string();
        let map = sentence_map(&c, sentence_index, grid, &sentence_text)?;
        let unit = normalize_unit(&map);
        let ext = match format {
            MapFormat::Csv => "csv",
            MapFormat::Pgm => "pgm",
        };
        let path = out_dir.join(format!("sim_{}_s{sentence_index}.{ext}", record.image_id));
        export_map(&unit, &path, format)?;
        written.push(path);
    }
    echo_config(config, out_dir)?;
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Preset, RunConfig};

    fn tiny_run_config() -> RunConfig {
        let mut c = RunConfig::preset(Preset::Desk);
        c.synth.num_patients = 6;
        c.synth.studies_per_patient = 2;
        c.encoder.embed_dim = 16;
        c.encoder.vision_width = 16;
        c.encoder.text_width = 16;
        c.encoder.vocab_size = 128;
        c.encoder.max_text_tokens = 72;
        c.train.total_steps = 3;
        c.train.warmup_steps = 1;
        c.train.delta = 1;
        c.train.batch_size = 2;
        c.eval.probe_steps = 30;
        c.eval.ft_steps = 2;
        c.eval.ft_batch_size = 2;
        c
    }

    #[test]
    fn synth_pretrain_eval_simmap_pipeline() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_run_config();
        let data_dir = dir.path().join("data");
        let n = cmd_synth(&config, &data_dir).unwrap();
        assert_eq!(n, 6 * 2 * 4);
        assert!(data_dir.join("config.txt").exists());

        let caps = dir.path().join("captions.csv");
        let count = cmd_captions(&config, &data_dir, &caps, CaptionTemplate::builtin()).unwrap();
        assert_eq!(count, n);
        let text = std::fs::read_to_string(&caps).unwrap();
        assert!(text.lines().count() == n + 1);

        let run_dir = dir.path().join("run");
        let out = cmd_pretrain(
            &config,
            &data_dir,
            &run_dir,
            CaptionTemplate::builtin(),
            None,
            None,
        )
        .unwrap();
        assert!(out.checkpoint.join("manifest.txt").exists());
        let metrics = std::fs::read_to_string(&out.metrics).unwrap();
        assert_eq!(metrics.lines().count(), 4); // header + 3 steps
        assert!(metrics.starts_with("step,lr,"));

        let eval_dir = dir.path().join("eval");
        let report = cmd_eval(
            &config,
            &data_dir,
            &out.checkpoint,
            &eval_dir,
            EvalMode::ZeroShot,
            CaptionTemplate::builtin(),
        )
        .unwrap();
        assert!(report.balanced_accuracy >= 0.0);
        assert!(eval_dir.join("report_zeroshot.json").exists());
        assert!(eval_dir.join("confusion_zeroshot.csv").exists());

        let probe_report = cmd_eval(
            &config,
            &data_dir,
            &out.checkpoint,
            &eval_dir,
            EvalMode::Probe,
            CaptionTemplate::builtin(),
        )
        .unwrap();
        assert!(probe_report.total() > 0);

        let maps_dir = dir.path().join("maps");
        let written = cmd_simmap(
            &config,
            &data_dir,
            &out.checkpoint,
            &maps_dir,
            4,
            MapFormat::Csv,
            2,
            CaptionTemplate::builtin(),
        )
        .unwrap();
        assert_eq!(written.len(), 2);
        assert!(written[0].exists());
    }

    #[test]
    fn pretrain_is_reproducible_byte_for_byte() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_run_config();
        let data_dir = dir.path().join("data");
        cmd_synth(&config, &data_dir).unwrap();
        let a = cmd_pretrain(
            &config,
            &data_dir,
            &dir.path().join("a"),
            CaptionTemplate::builtin(),
            None,
            None,
        )
        .unwrap();
        let b = cmd_pretrain(
            &config,
            &data_dir,
            &dir.path().join("b"),
            CaptionTemplate::builtin(),
            None,
            None,
        )
        .unwrap();
        let ma = std::fs::read(&a.metrics).unwrap();
        let mb = std::fs::read(&b.metrics).unwrap();
        assert_eq!(ma, mb);
    }
}
