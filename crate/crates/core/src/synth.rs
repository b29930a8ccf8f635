//! Synthetic paired image/record corpus with planted, recoverable structure.
//!
//! Every study gets a class; the class decides a findings phrase in the
//! record and an oriented texture planted at a class-determined grid cell,
//! shared by all views of the study on top of a patient-level smooth
//! intensity field. The sidecar file records class and planted cell per
//! image so downstream metrics have ground truth.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::data_model::{BiRads, Density, ImageRecord, Side, Study, View};
use crate::error::{MamaError, Result};
use crate::image::{write_pgm, GrayImage};
use crate::rng::Rng;

/// Findings vocabulary; class k uses the k-th phrase.
pub const CLASS_FINDINGS: [&str; 7] = [
    "round calcification",
    "spiculated mass",
    "architectural distortion",
    "focal asymmetry",
    "linear calcification",
    "oval mass",
    "global asymmetry",
];

const RACES: [&str; 4] = ["group a", "group b", "group c", "group d"];
const MACHINES: [&str; 3] = ["unit-1", "unit-2", "unit-3"];
const PROCEDURES: [&str; 2] = ["digital 2d", "tomosynthesis"];
const SITES: [&str; 3] = ["clinic east", "clinic west", "clinic north"];

const PATIENT_FIELD_AMPLITUDE: f64 = 0.15;
const BASE_LEVEL: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub num_patients: usize,
    pub studies_per_patient: usize,
    pub image_size: usize,
    pub patch_rows: usize,
    pub patch_cols: usize,
    pub num_classes: usize,
    pub feature_strength: f64,
    pub noise_level: f64,
    pub seed: u64,
    /// Per-class sampling weights; empty means uniform.
    pub class_priors: Vec<f64>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_patients: 50,
            studies_per_patient: 16,
            image_size: 32,
            patch_rows: 4,
            patch_cols: 4,
            num_classes: 4,
            feature_strength: 0.65,
            noise_level: 0.03,
            seed: 0,
            class_priors: Vec::new(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(MamaError::Config("need at least 2 classes".into()));
        }
        if self.num_classes > CLASS_FINDINGS.len() {
            return Err(MamaError::Config(format!(
                "at most {} classes supported",
                CLASS_FINDINGS.len()
            )));
        }
        if self.patch_rows == 0
            || self.patch_cols == 0
            || self.image_size % self.patch_rows != 0
            || self.image_size % self.patch_cols != 0
        {
            return Err(MamaError::Config(format!(
                "image size {} not divisible by patch grid {}x{}",
                self.image_size, self.patch_rows, self.patch_cols
            )));
        }
        if self.num_classes > self.patch_rows * self.patch_cols {
            return Err(MamaError::Config(
                "more classes than grid cells; planted cells would collide".into(),
            ));
        }
        if !self.class_priors.is_empty() {
            if self.class_priors.len() != self.num_classes {
                return Err(MamaError::Config(format!(
                    "{} priors for {} classes",
                    self.class_priors.len(),
                    self.num_classes
                )));
            }
            if self.class_priors.iter().any(|p| *p < 0.0)
                || self.class_priors.iter().sum::<f64>() <= 0.0
            {
                return Err(MamaError::Config("invalid class priors".into()));
            }
        }
        Ok(())
    }

    /// The grid cell where class k's texture is planted: evenly spaced
    /// over the flattened grid, distinct for any class count up to P.
    pub fn planted_cell(&self, class_k: usize) -> (usize, usize) {
        let p = self.patch_rows * self.patch_cols;
        let idx = if self.num_classes > 1 {
            class_k * (p - 1) / (self.num_classes - 1)
        } else {
            0
        };
        (idx / self.patch_cols, idx % self.patch_cols)
    }
}

/// Ground truth for one generated image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlantedTruth {
    pub class: usize,
    pub cell_row: usize,
    pub cell_col: usize,
}

/// A complete generated corpus kept in memory.
pub struct SynthCorpus {
    pub records: Vec<ImageRecord>,
    pub images: BTreeMap<String, GrayImage>,
    pub truth: BTreeMap<String, PlantedTruth>,
}

fn fnv(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}

/// Smooth low-frequency field shared by everything a patient produces.
fn patient_field(size: usize, rng: &mut Rng) -> Vec<f64> {
    let mut field = vec![0.0; size * size];
    for _ in 0..3 {
        let fy = rng.range(0.3, 1.2) / size as f64;
        let fx = rng.range(0.3, 1.2) / size as f64;
        let phase = rng.range(0.0, std::f64::consts::TAU);
        let amp = rng.range(0.5, 1.0);
        for y in 0..size {
            for x in 0..size {
                field[y * size + x] +=
                    amp * (std::f64::consts::TAU * (fy * y as f64 + fx * x as f64) + phase).cos();
            }
        }
    }
    let peak = field.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-9);
    for v in &mut field {
        *v *= PATIENT_FIELD_AMPLITUDE / peak;
    }
    field
}

/// Oriented zero-mean grating for class k at the given phase.
fn class_texture(k: usize, num_classes: usize, ph: usize, pw: usize, phase: f64) -> Vec<f64> {
    let theta = std::f64::consts::PI * k as f64 / num_classes as f64;
    // stay well below Nyquist for 8-pixel cells, even at 45 degrees
    let freq = 1.0 + 0.5 * k as f64;
    let (sin, cos) = theta.sin_cos();
    let mut tex = vec![0.0; ph * pw];
    for y in 0..ph {
        for x in 0..pw {
            let u = (x as f64 * cos + y as f64 * sin) * freq / pw as f64;
            tex[y * pw + x] = (std::f64::consts::TAU * u + phase).sin();
        }
    }
    // center so the planted cell adds energy but no mean-intensity shortcut
    let mean = tex.iter().sum::<f64>() / tex.len() as f64;
    for v in &mut tex {
        *v -= mean;
    }
    tex
}

/// Record, rendered image and ground truth for one generated view.
pub type GeneratedView = (ImageRecord, GrayImage, PlantedTruth);

/// Generate one study: four views (L/R x CC/MLO) whose images share the
/// patient field and the class texture at the class-determined cell.
pub fn generate_study(
    patient_id: &str,
    study_id: &str,
    class_k: usize,
    config: &SynthConfig,
    rng: &mut Rng,
) -> Result<(Study, Vec<GeneratedView>)> {
    config.validate()?;
    if class_k >= config.num_classes {
        return Err(MamaError::Input(format!(
            "class {class_k} outside 0..{}",
            config.num_classes
        )));
    }
    let size = config.image_size;
    let (ph, pw) = (size / config.patch_rows, size / config.patch_cols);
    let (cell_row, cell_col) = config.planted_cell(class_k);

    // patient-level draws come from a stream keyed by the patient id
    let mut patient_rng = Rng::new(config.seed).derive(fnv(patient_id));
    let field = patient_field(size, &mut patient_rng);
    let age = 40 + patient_rng.below(40);
    let race = *patient_rng.choose(&RACES);

    // study-level draws
    let machine = *rng.choose(&MACHINES);
    let procedure = *rng.choose(&PROCEDURES);
    let site = *rng.choose(&SITES);
    let density = Density::from_index(rng.below(Density::COUNT)).unwrap();
    let birads = BiRads::new(rng.below(BiRads::COUNT) as u8).unwrap();
    let cancer = birads.value() >= 5;
    let findings = CLASS_FINDINGS[class_k];
    // canonical phase per class: linear patch features must respond
    // coherently across studies for the alignment to accumulate
    let phase = 0.9 * class_k as f64;
    let texture = class_texture(class_k, config.num_classes, ph, pw, phase);

    let truth = PlantedTruth {
        class: class_k,
        cell_row,
        cell_col,
    };
    let mut outputs = Vec::new();
    let mut images_records = Vec::new();
    for (side, view) in [
        (Side::Left, View::Cc),
        (Side::Left, View::Mlo),
        (Side::Right, View::Cc),
        (Side::Right, View::Mlo),
    ] {
        let image_id = format!(
            "{study_id}_{}{}",
            side.code().to_lowercase(),
            view.code().to_lowercase()
        );
        let mut img = GrayImage::new(size, size);
        for y in 0..size {
            for x in 0..size {
                let mut v = BASE_LEVEL + field[y * size + x];
                v += config.noise_level * rng.normal();
                img.set(y, x, v);
            }
        }
        for dy in 0..ph {
            for dx in 0..pw {
                let y = cell_row * ph + dy;
                let x = cell_col * pw + dx;
                let v = img.at(y, x) + config.feature_strength * texture[dy * pw + dx];
                img.set(y, x, v);
            }
        }
        img.clamp_unit();

        let record = ImageRecord {
            image_id: image_id.clone(),
            patient_id: patient_id.to_string(),
            study_id: study_id.to_string(),
            side,
            view,
            meta: vec![
                ("age".into(), age.to_string()),
                ("race".into(), race.to_string()),
                ("procedure".into(), procedure.to_string()),
                ("machine".into(), machine.to_string()),
                ("site".into(), site.to_string()),
                ("findings".into(), findings.to_string()),
                ("impression".into(), format!("consistent with {findings}")),
            ],
            density,
            birads,
            cancer: Some(cancer),
            image_path: format!("images/{image_id}.pgm"),
        };
        images_records.push(record.clone());
        outputs.push((record, img, truth));
    }

    let study = Study {
        study_id: study_id.to_string(),
        patient_id: patient_id.to_string(),
        images: images_records,
    };
    Ok((study, outputs))
}

/// Generate the full corpus in memory.
pub fn generate_corpus(config: &SynthConfig) -> Result<SynthCorpus> {
    config.validate()?;
    let mut corpus = SynthCorpus {
        records: Vec::new(),
        images: BTreeMap::new(),
        truth: BTreeMap::new(),
    };
    let root = Rng::new(config.seed);
    let mut class_rng = root.derive(0x5eed_c1a5);
    let priors = if config.class_priors.is_empty() {
        vec![1.0; config.num_classes]
    } else {
        config.class_priors.clone()
    };
    let total: f64 = priors.iter().sum();

    for p in 0..config.num_patients {
        let patient_id = format!("p{p:04}");
        for s in 0..config.studies_per_patient {
            let study_id = format!("{patient_id}s{s:03}");
            let mut study_rng = root.derive(fnv(&study_id));
            let class_k = {
                let draw = class_rng.next_f64() * total;
                let mut acc = 0.0;
                let mut k = config.num_classes - 1;
                for (i, w) in priors.iter().enumerate() {
                    acc += w;
                    if draw < acc {
                        k = i;
                        break;
                    }
                }
                k
            };
            let (_, outputs) =
                generate_study(&patient_id, &study_id, class_k, config, &mut study_rng)?;
            for (record, image, truth) in outputs {
                corpus.truth.insert(record.image_id.clone(), truth);
                corpus.images.insert(record.image_id.clone(), image);
                corpus.records.push(record);
            }
        }
    }
    Ok(corpus)
}

/// Write the corpus to disk: `records.csv`, `images/*.pgm` and the ground
/// truth sidecar `ground_truth.csv` (image_id,class,cell_row,cell_col).
pub fn generate_dataset(config: &SynthConfig, out_dir: &Path) -> Result<SynthCorpus> {
    let corpus = generate_corpus(config)?;
    let images_dir = out_dir.join("images");
    fs::create_dir_all(&images_dir)
        .map_err(|e| MamaError::io(images_dir.display().to_string(), e))?;

    let csv_path = out_dir.join("records.csv");
    let mut w = csv::Writer::from_path(&csv_path)
        .map_err(|e| MamaError::Schema(format!("cannot write {}: {e}", csv_path.display())))?;
    w.write_record([
        "image_id",
        "patient_id",
        "study_id",
        "side",
        "view",
        "density",
        "birads",
        "cancer",
        "image_path",
        "age",
        "race",
        "procedure",
        "machine",
        "site",
        "findings",
        "impression",
    ])
    .map_err(|e| MamaError::Schema(format!("csv write: {e}")))?;
    for r in &corpus.records {
        let meta = |k: &str| r.meta_value(k).unwrap_or("").to_string();
        w.write_record([
            r.image_id.clone(),
            r.patient_id.clone(),
            r.study_id.clone(),
            r.side.code().to_string(),
            r.view.code().to_string(),
            r.density.label().to_string(),
            r.birads.to_string(),
            match r.cancer {
                Some(true) => "1".into(),
                Some(false) => "0".into(),
                None => String::new(),
            },
            r.image_path.clone(),
            meta("age"),
            meta("race"),
            meta("procedure"),
            meta("machine"),
            meta("site"),
            meta("findings"),
            meta("impression"),
        ])
        .map_err(|e| MamaError::Schema(format!("csv write: {e}")))?;
    }
    w.flush()
        .map_err(|e| MamaError::io(csv_path.display().to_string(), e))?;

    let sidecar = out_dir.join("ground_truth.csv");
    let mut lines = String::from("image_id,class,cell_row,cell_col\n");
    for (id, t) in &corpus.truth {
        lines.push_str(&format!("{id},{},{},{}\n", t.class, t.cell_row, t.cell_col));
    }
    fs::write(&sidecar, lines).map_err(|e| MamaError::io(sidecar.display().to_string(), e))?;

    for (id, img) in &corpus.images {
        write_pgm(img, &images_dir.join(format!("{id}.pgm")))?;
    }
    Ok(corpus)
}

/// Read a ground-truth sidecar back.
pub fn load_ground_truth(path: &Path) -> Result<BTreeMap<String, PlantedTruth>> {
    let text =
        fs::read_to_string(path).map_err(|e| MamaError::io(path.display().to_string(), e))?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 4 {
            return Err(MamaError::Row {
                row: i,
                message: format!("bad sidecar line `{line}`"),
            });
        }
        let parse = |s: &str| -> Result<usize> {
            s.trim().parse().map_err(|_| MamaError::Row {
                row: i,
                message: format!("bad number `{s}`"),
            })
        };
        out.insert(
            parts[0].to_string(),
            PlantedTruth {
                class: parse(parts[1])?,
                cell_row: parse(parts[2])?,
                cell_col: parse(parts[3])?,
            },
        );
    }
    Ok(out)
}

/// Per-cell pixel variance; the planted cell shows up as the energy peak.
pub fn cell_energies(img: &GrayImage, patch_rows: usize, patch_cols: usize) -> Vec<f64> {
    let ph = img.height / patch_rows;
    let pw = img.width / patch_cols;
    let mut out = Vec::with_capacity(patch_rows * patch_cols);
    for r in 0..patch_rows {
        for c in 0..patch_cols {
            let mut sum = 0.0;
            let mut sq = 0.0;
            for dy in 0..ph {
                for dx in 0..pw {
                    let v = img.at(r * ph + dy, c * pw + dx);
                    sum += v;
                    sq += v * v;
                }
            }
            let n = (ph * pw) as f64;
            let mean = sum / n;
            out.push(sq / n - mean * mean);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::{group_studies, parse_records, CsvSchema};

    fn small_config() -> SynthConfig {
        SynthConfig {
            num_patients: 6,
            studies_per_patient: 2,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn noiseless_plant_is_energy_peak() {
        let config = SynthConfig {
            noise_level: 0.0,
            ..small_config()
        };
        let mut rng = Rng::new(1);
        for k in 0..config.num_classes {
            let (_, outputs) = generate_study("p0", "p0s0", k, &config, &mut rng).unwrap();
            for (_, img, truth) in outputs {
                let energies = cell_energies(&img, config.patch_rows, config.patch_cols);
                let argmax = energies
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0;
                assert_eq!(
                    (argmax / config.patch_cols, argmax % config.patch_cols),
                    (truth.cell_row, truth.cell_col)
                );
            }
        }
    }

    #[test]
    fn same_seed_same_images() {
        let config = small_config();
        let a = generate_corpus(&config).unwrap();
        let b = generate_corpus(&config).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.images, b.images);
    }

    #[test]
    fn planted_cells_distinct_per_class() {
        for k in 2..=CLASS_FINDINGS.len() {
            let config = SynthConfig {
                num_classes: k,
                ..SynthConfig::default()
            };
            let cells: Vec<(usize, usize)> = (0..k).map(|c| config.planted_cell(c)).collect();
            let unique: std::collections::BTreeSet<_> = cells.iter().collect();
            assert_eq!(unique.len(), k, "collision at K={k}: {cells:?}");
        }
    }

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let mut cov = 0.0;
        let mut va = 0.0;
        let mut vb = 0.0;
        for (x, y) in a.iter().zip(b) {
            cov += (x - ma) * (y - mb);
            va += (x - ma) * (x - ma);
            vb += (y - mb) * (y - mb);
        }
        cov / (va.sqrt() * vb.sqrt())
    }

    #[test]
    fn study_views_correlate_across_patients_do_not() {
        // low noise isolates the shared patient-field component
        let config = SynthConfig {
            num_patients: 8,
            studies_per_patient: 1,
            feature_strength: 0.0,
            noise_level: 0.015,
            ..SynthConfig::default()
        };
        let corpus = generate_corpus(&config).unwrap();
        let studies = group_studies(&corpus.records);
        let mut same_study = Vec::new();
        let mut cross_patient = Vec::new();
        for s in &studies {
            let a = &corpus.images[&s.images[0].image_id];
            let b = &corpus.images[&s.images[1].image_id];
            same_study.push(pearson(&a.pixels, &b.pixels));
        }
        for pair in studies.windows(2) {
            let a = &corpus.images[&pair[0].images[0].image_id];
            let b = &corpus.images[&pair[1].images[0].image_id];
            if pair[0].patient_id != pair[1].patient_id {
                cross_patient.push(pearson(&a.pixels, &b.pixels));
            }
        }
        let mean_same = same_study.iter().sum::<f64>() / same_study.len() as f64;
        let mean_cross = cross_patient.iter().sum::<f64>() / cross_patient.len() as f64;
        assert!(mean_same > 0.9, "same-study correlation {mean_same}");
        assert!(mean_cross < 0.5, "cross-patient correlation {mean_cross}");
    }

    #[test]
    fn corpus_counts_and_csv_roundtrip() {
        let config = small_config();
        let dir = tempfile::tempdir().unwrap();
        let corpus = generate_dataset(&config, dir.path()).unwrap();
        assert_eq!(
            corpus.records.len(),
            4 * config.num_patients * config.studies_per_patient
        );
        let text = std::fs::read_to_string(dir.path().join("records.csv")).unwrap();
        let parsed = parse_records(&text, &CsvSchema::default()).unwrap();
        assert_eq!(parsed.len(), corpus.records.len());
        assert_eq!(parsed, corpus.records);
        let truth = load_ground_truth(&dir.path().join("ground_truth.csv")).unwrap();
        assert_eq!(truth.len(), corpus.truth.len());
        let img = crate::image::load_image(&dir.path().join(&parsed[0].image_path)).unwrap();
        assert_eq!(img.width, config.image_size);
    }

    #[test]
    fn class_frequencies_roughly_uniform() {
        let config = SynthConfig {
            num_patients: 40,
            studies_per_patient: 4,
            ..SynthConfig::default()
        };
        let corpus = generate_corpus(&config).unwrap();
        let studies = group_studies(&corpus.records);
        let mut counts = vec![0usize; config.num_classes];
        for s in &studies {
            counts[corpus.truth[&s.images[0].image_id].class] += 1;
        }
        let n = studies.len() as f64;
        let expect = n / config.num_classes as f64;
        // ~4 sigma binomial interval
        let sigma = (n * 0.25 * 0.75).sqrt();
        for (k, &c) in counts.iter().enumerate() {
            assert!(
                (c as f64 - expect).abs() < 4.0 * sigma,
                "class {k}: {c} vs {expect}"
            );
        }
    }

    #[test]
    fn mean_pixel_carries_no_class_signal_but_patch_stats_do() {
        // probe on raw image means must fail; nearest-centroid on per-cell
        // energies must succeed
        let config = SynthConfig {
            num_patients: 24,
            studies_per_patient: 1,
            ..SynthConfig::default()
        };
        let corpus = generate_corpus(&config).unwrap();
        let ids: Vec<&String> = corpus.images.keys().collect();
        let half = ids.len() / 2;

        // nearest-class-centroid classifiers on two feature sets, trained on
        // the first half, scored on the second
        let energy_feats = |id: &String| cell_energies(&corpus.images[id], 4, 4);
        let mean_feats = |id: &String| {
            let img = &corpus.images[id];
            vec![img.pixels.iter().sum::<f64>() / img.pixels.len() as f64]
        };
        let accuracy = |feats: &dyn Fn(&String) -> Vec<f64>| {
            let dim = feats(ids[0]).len();
            let mut centroids = vec![vec![0.0; dim]; config.num_classes];
            let mut counts = vec![0usize; config.num_classes];
            for id in &ids[..half] {
                let t = corpus.truth[*id];
                for (c, v) in centroids[t.class].iter_mut().zip(feats(id)) {
                    *c += v;
                }
                counts[t.class] += 1;
            }
            for (c, n) in centroids.iter_mut().zip(&counts) {
                if *n > 0 {
                    c.iter_mut().for_each(|v| *v /= *n as f64);
                }
            }
            let mut correct = 0usize;
            for id in &ids[half..] {
                let e = feats(id);
                let pred = centroids
                    .iter()
                    .enumerate()
                    .min_by(|a, b| {
                        let da: f64 = a.1.iter().zip(&e).map(|(x, y)| (x - y) * (x - y)).sum();
                        let db: f64 = b.1.iter().zip(&e).map(|(x, y)| (x - y) * (x - y)).sum();
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap()
                    .0;
                if pred == corpus.truth[*id].class {
                    correct += 1;
                }
            }
            correct as f64 / (ids.len() - half) as f64
        };

        let patch_acc = accuracy(&energy_feats);
        let mean_acc = accuracy(&mean_feats);
        assert!(patch_acc > 0.9, "patch-statistic recovery only {patch_acc}");
        assert!(
            mean_acc < 0.9,
            "raw intensity mean should not separate classes: {mean_acc}"
        );
    }
}
