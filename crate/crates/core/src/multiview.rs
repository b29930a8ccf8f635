//! Positive-pair sampling over studies, image augmentation and mini-batch
//! assembly.

use crate::caption::Caption;
use crate::data_model::{ImageRecord, Study};
use crate::error::{MamaError, Result};
use crate::image::GrayImage;
use crate::rng::Rng;

/// How the positive view is drawn from the anchor's study.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplingStrategy {
    SameImage,
    IntraSide,
    IntraStudyNoSelf,
    IntraStudy,
}

impl SamplingStrategy {
    pub fn parse(s: &str) -> Option<SamplingStrategy> {
        match s.trim().to_ascii_lowercase().as_str() {
            "same" | "same-image" | "same_image" => Some(SamplingStrategy::SameImage),
            "intra-side" | "intra_side" => Some(SamplingStrategy::IntraSide),
            "intra-study-no-self" | "intra_study_no_self" => {
                Some(SamplingStrategy::IntraStudyNoSelf)
            }
            "intra-study" | "intra_study" => Some(SamplingStrategy::IntraStudy),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            SamplingStrategy::SameImage => "same",
            SamplingStrategy::IntraSide => "intra-side",
            SamplingStrategy::IntraStudyNoSelf => "intra-study-no-self",
            SamplingStrategy::IntraStudy => "intra-study",
        }
    }
}

/// Draw the positive record for an anchor within its study.
pub fn sample_positive(
    study: &Study,
    anchor: &ImageRecord,
    strategy: SamplingStrategy,
    rng: &mut Rng,
) -> Result<ImageRecord> {
    if !study.images.iter().any(|r| r.image_id == anchor.image_id) {
        return Err(MamaError::Input(format!(
            "anchor {} not part of study {}",
            anchor.image_id, study.study_id
        )));
    }
    let pick =
        |rng: &mut Rng, pool: Vec<&ImageRecord>| -> ImageRecord { (*rng.choose(&pool)).clone() };
    let record = match strategy {
        SamplingStrategy::SameImage => anchor.clone(),
        SamplingStrategy::IntraSide => {
            let pool: Vec<&ImageRecord> = study
                .images
                .iter()
                .filter(|r| r.side == anchor.side)
                .collect();
            pick(rng, pool)
        }
        SamplingStrategy::IntraStudyNoSelf => {
            let pool: Vec<&ImageRecord> = study
                .images
                .iter()
                .filter(|r| r.image_id != anchor.image_id)
                .collect();
            if pool.is_empty() {
                // single-image study: fall back to the anchor itself
                anchor.clone()
            } else {
                pick(rng, pool)
            }
        }
        SamplingStrategy::IntraStudy => pick(rng, study.images.iter().collect()),
    };
    Ok(record)
}

/// Augmentation menu. Every transform is individually toggleable; all
/// probabilities zero means the output is the input, bit for bit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub rotate_prob: f64,
    /// Maximum absolute rotation in degrees.
    pub max_rotate_deg: f64,
    pub crop_prob: f64,
    /// Lower bound of the crop scale range (upper bound is 1.0).
    pub min_crop_scale: f64,
    pub jitter_prob: f64,
    pub jitter_brightness: f64,
    pub jitter_contrast: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            // default off: mirroring an oriented texture imitates the class
            // with the reflected orientation
            flip_prob: 0.0,
            rotate_prob: 0.25,
            max_rotate_deg: 10.0,
            crop_prob: 0.25,
            min_crop_scale: 0.8,
            jitter_prob: 0.5,
            jitter_brightness: 0.08,
            jitter_contrast: 0.1,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        AugmentConfig {
            flip_prob: 0.0,
            rotate_prob: 0.0,
            max_rotate_deg: 10.0,
            crop_prob: 0.0,
            min_crop_scale: 0.8,
            jitter_prob: 0.0,
            jitter_brightness: 0.0,
            jitter_contrast: 0.0,
        }
    }
}

fn bilinear(img: &GrayImage, y: f64, x: f64) -> f64 {
    let clamp = |v: f64, hi: usize| v.clamp(0.0, (hi - 1) as f64);
    let y = clamp(y, img.height);
    let x = clamp(x, img.width);
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(img.height - 1);
    let x1 = (x0 + 1).min(img.width - 1);
    let fy = y - y0 as f64;
    let fx = x - x0 as f64;
    let top = img.at(y0, x0) * (1.0 - fx) + img.at(y0, x1) * fx;
    let bot = img.at(y1, x0) * (1.0 - fx) + img.at(y1, x1) * fx;
    top * (1.0 - fy) + bot * fy
}

/// Random flip, small rotation, crop-and-resize and intensity jitter.
/// Output dimensions always equal input dimensions.
pub fn augment(image: &GrayImage, rng: &mut Rng, config: &AugmentConfig) -> GrayImage {
    let mut out = image.clone();

    if config.flip_prob > 0.0 && rng.chance(config.flip_prob) {
        let mut flipped = out.clone();
        for y in 0..out.height {
            for x in 0..out.width {
                flipped.set(y, x, out.at(y, out.width - 1 - x));
            }
        }
        out = flipped;
    }

    if config.rotate_prob > 0.0 && rng.chance(config.rotate_prob) {
        let deg = rng.range(-config.max_rotate_deg, config.max_rotate_deg);
        let theta = deg.to_radians();
        let (sin, cos) = theta.sin_cos();
        let cy = (out.height as f64 - 1.0) / 2.0;
        let cx = (out.width as f64 - 1.0) / 2.0;
        let mut rotated = GrayImage::new(out.width, out.height);
        for y in 0..out.height {
            for x in 0..out.width {
                let dy = y as f64 - cy;
                let dx = x as f64 - cx;
                let sy = cy + dy * cos - dx * sin;
                let sx = cx + dy * sin + dx * cos;
                rotated.set(y, x, bilinear(&out, sy, sx));
            }
        }
        out = rotated;
    }

    if config.crop_prob > 0.0 && rng.chance(config.crop_prob) {
        let scale = rng.range(config.min_crop_scale, 1.0);
        let ch = (out.height as f64 * scale).max(1.0);
        let cw = (out.width as f64 * scale).max(1.0);
        let oy = rng.range(0.0, out.height as f64 - ch);
        let ox = rng.range(0.0, out.width as f64 - cw);
        let mut cropped = GrayImage::new(out.width, out.height);
        for y in 0..out.height {
            for x in 0..out.width {
                let sy = oy + y as f64 / (out.height as f64 - 1.0) * (ch - 1.0);
                let sx = ox + x as f64 / (out.width as f64 - 1.0) * (cw - 1.0);
                cropped.set(y, x, bilinear(&out, sy, sx));
            }
        }
        out = cropped;
    }

    if config.jitter_prob > 0.0 && rng.chance(config.jitter_prob) {
        let brightness = rng.range(-config.jitter_brightness, config.jitter_brightness);
        let contrast = rng.range(1.0 - config.jitter_contrast, 1.0 + config.jitter_contrast);
        for p in &mut out.pixels {
            *p = ((*p - 0.5) * contrast + 0.5 + brightness).clamp(0.0, 1.0);
        }
    }

    out
}

/// One training mini-batch: anchors, their positives, and the anchors'
/// captions and records, slot-aligned.
pub struct PairBatch {
    pub primary_images: Vec<GrayImage>,
    pub positive_images: Vec<GrayImage>,
    pub captions: Vec<Caption>,
    pub records: Vec<ImageRecord>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Assemble a mini-batch. Anchors are drawn uniformly over all images; both
/// views are augmented independently; the caption is built from the anchor's
/// record with masking applied per draw.
pub fn assemble_batch(
    studies: &[Study],
    batch_size: usize,
    strategy: SamplingStrategy,
    augment_cfg: &AugmentConfig,
    rng: &mut Rng,
    mut load_image: impl FnMut(&ImageRecord) -> Result<GrayImage>,
    mut caption_fn: impl FnMut(&ImageRecord, &mut Rng) -> Result<Caption>,
) -> Result<PairBatch> {
    if batch_size == 0 {
        return Err(MamaError::Input("batch size must be at least 1".into()));
    }
    let flat: Vec<(usize, usize)> = studies
        .iter()
        .enumerate()
        .flat_map(|(si, s)| (0..s.images.len()).map(move |ii| (si, ii)))
        .collect();
    if flat.is_empty() {
        return Err(MamaError::Input("no images available".into()));
    }

    let mut batch = PairBatch {
        primary_images: Vec::with_capacity(batch_size),
        positive_images: Vec::with_capacity(batch_size),
        captions: Vec::with_capacity(batch_size),
        records: Vec::with_capacity(batch_size),
    };
    for _ in 0..batch_size {
        let (si, ii) = flat[rng.below(flat.len())];
        let study = &studies[si];
        let anchor = &study.images[ii];
        let positive = sample_positive(study, anchor, strategy, rng)?;
        debug_assert_eq!(positive.study_id, anchor.study_id);
        let primary = augment(&load_image(anchor)?, rng, augment_cfg);
        let pos_img = augment(&load_image(&positive)?, rng, augment_cfg);
        let caption = caption_fn(anchor, rng)?;
        batch.primary_images.push(primary);
        batch.positive_images.push(pos_img);
        batch.captions.push(caption);
        batch.records.push(anchor.clone());
    }
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::caption::{build_clip_style_caption, split_sentences};
    use crate::data_model::{BiRads, Density, Side, View};
    use std::collections::BTreeMap;

    fn record(image: &str, side: Side, view: View) -> ImageRecord {
        ImageRecord {
            image_id: image.into(),
            patient_id: "p1".into(),
            study_id: "s1".into(),
            side,
            view,
            meta: Vec::new(),
            density: Density::A,
            birads: BiRads::new(1).unwrap(),
            cancer: None,
            image_path: String::new(),
        }
    }

    fn four_view_study() -> Study {
        Study {
            study_id: "s1".into(),
            patient_id: "p1".into(),
            images: vec![
                record("lcc", Side::Left, View::Cc),
                record("lmlo", Side::Left, View::Mlo),
                record("rcc", Side::Right, View::Cc),
                record("rmlo", Side::Right, View::Mlo),
            ],
        }
    }

    #[test]
    fn same_image_returns_anchor() {
        let study = four_view_study();
        let mut rng = Rng::new(0);
        for anchor in &study.images {
            let p = sample_positive(&study, anchor, SamplingStrategy::SameImage, &mut rng).unwrap();
            assert_eq!(p.image_id, anchor.image_id);
        }
    }

    #[test]
    fn intra_study_is_uniform() {
        let study = four_view_study();
        let anchor = &study.images[0];
        let mut rng = Rng::new(1);
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        let n = 40_000;
        for _ in 0..n {
            let p =
                sample_positive(&study, anchor, SamplingStrategy::IntraStudy, &mut rng).unwrap();
            *counts.entry(p.image_id).or_default() += 1;
        }
        assert_eq!(counts.len(), 4);
        for (id, c) in counts {
            let freq = c as f64 / n as f64;
            assert!((freq - 0.25).abs() < 0.01, "{id}: {freq}");
        }
    }

    #[test]
    fn intra_side_never_crosses_sides() {
        let study = four_view_study();
        let anchor = &study.images[0]; // LEFT CC
        let mut rng = Rng::new(2);
        let mut seen = BTreeMap::new();
        for _ in 0..2_000 {
            let p = sample_positive(&study, anchor, SamplingStrategy::IntraSide, &mut rng).unwrap();
            assert_eq!(p.side, Side::Left);
            *seen.entry(p.image_id).or_insert(0usize) += 1;
        }
        assert_eq!(seen.len(), 2, "both LEFT images should appear");
    }

    #[test]
    fn no_self_excludes_anchor_with_fallback() {
        let study = four_view_study();
        let anchor = &study.images[1];
        let mut rng = Rng::new(3);
        for _ in 0..500 {
            let p = sample_positive(&study, anchor, SamplingStrategy::IntraStudyNoSelf, &mut rng)
                .unwrap();
            assert_ne!(p.image_id, anchor.image_id);
        }
        let single = Study {
            study_id: "s1".into(),
            patient_id: "p1".into(),
            images: vec![record("only", Side::Left, View::Cc)],
        };
        let p = sample_positive(
            &single,
            &single.images[0],
            SamplingStrategy::IntraStudyNoSelf,
            &mut rng,
        )
        .unwrap();
        assert_eq!(p.image_id, "only");
    }

    #[test]
    fn foreign_anchor_is_an_error() {
        let study = four_view_study();
        let outsider = record("elsewhere", Side::Left, View::Cc);
        let mut rng = Rng::new(4);
        assert!(
            sample_positive(&study, &outsider, SamplingStrategy::IntraStudy, &mut rng).is_err()
        );
    }

    fn noise_image(seed: u64, size: usize) -> GrayImage {
        let mut rng = Rng::new(seed);
        let mut img = GrayImage::new(size, size);
        img.pixels.iter_mut().for_each(|p| *p = rng.next_f64());
        img
    }

    #[test]
    fn augment_identity_when_disabled() {
        let img = noise_image(5, 16);
        let mut rng = Rng::new(6);
        let out = augment(&img, &mut rng, &AugmentConfig::none());
        assert_eq!(out, img);
    }

    #[test]
    fn augment_deterministic_under_seed() {
        let img = noise_image(7, 16);
        let cfg = AugmentConfig::default();
        let a = augment(&img, &mut Rng::new(8), &cfg);
        let b = augment(&img, &mut Rng::new(8), &cfg);
        assert_eq!(a, b);
        let c = augment(&img, &mut Rng::new(9), &cfg);
        assert_ne!(a, c);
    }

    #[test]
    fn augment_preserves_dimensions() {
        let cfg = AugmentConfig {
            flip_prob: 1.0,
            rotate_prob: 1.0,
            crop_prob: 1.0,
            jitter_prob: 1.0,
            ..AugmentConfig::default()
        };
        let mut rng = Rng::new(10);
        for (w, h) in [(8usize, 8usize), (16, 16), (32, 32)] {
            let img = noise_image(w as u64, w.max(h));
            let out = augment(&img, &mut rng, &cfg);
            assert_eq!((out.width, out.height), (img.width, img.height));
            assert!(out
                .pixels
                .iter()
                .all(|p| (0.0..=1.0).contains(p) || p.is_finite()));
        }
    }

    #[test]
    fn batch_assembly_invariants() {
        let study = four_view_study();
        let studies = vec![study];
        let mut rng = Rng::new(11);
        let batch = assemble_batch(
            &studies,
            5,
            SamplingStrategy::IntraStudy,
            &AugmentConfig::none(),
            &mut rng,
            |_| Ok(noise_image(1, 8)),
            |r, _| {
                let mut c = build_clip_style_caption(r);
                c.sentence_spans = split_sentences(&c.text);
                Ok(c)
            },
        )
        .unwrap();
        assert_eq!(batch.len(), 5);
        for i in 0..5 {
            assert_eq!(batch.records[i].study_id, "s1");
            assert!(batch.captions[i].text.contains("BI-RADS"));
        }
    }

    #[test]
    fn batch_rejects_empty_inputs() {
        let mut rng = Rng::new(12);
        let err = assemble_batch(
            &[],
            4,
            SamplingStrategy::SameImage,
            &AugmentConfig::none(),
            &mut rng,
            |_| Ok(noise_image(1, 8)),
            |r, _| Ok(build_clip_style_caption(r)),
        );
        assert!(err.is_err());
    }
}
