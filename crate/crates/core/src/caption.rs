//! Report-style caption construction from tabular records.
//!
//! Captions come in three styles: the structured clinical template with
//! meta-information masking, a single-sentence class-label caption, and a
//! key/value tabular dump. The structured template is a fixture file, not
//! code: seven named segments with `{keyword}` placeholders and a
//! `[maskable]` footer naming the keywords that masking may remove.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::OnceLock;

use crate::data_model::ImageRecord;
use crate::error::{MamaError, Result};
use crate::rng::Rng;

/// The seven clinical report sections, in fixed order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SegmentName {
    Procedure,
    PatientMeta,
    ImageMeta,
    Composition,
    Findings,
    Impression,
    Assessment,
}

impl SegmentName {
    pub const ALL: [SegmentName; 7] = [
        SegmentName::Procedure,
        SegmentName::PatientMeta,
        SegmentName::ImageMeta,
        SegmentName::Composition,
        SegmentName::Findings,
        SegmentName::Impression,
        SegmentName::Assessment,
    ];

    fn parse(s: &str) -> Option<SegmentName> {
        match s.trim() {
            "PROCEDURE" => Some(SegmentName::Procedure),
            "PATIENT_META" => Some(SegmentName::PatientMeta),
            "IMAGE_META" => Some(SegmentName::ImageMeta),
            "COMPOSITION" => Some(SegmentName::Composition),
            "FINDINGS" => Some(SegmentName::Findings),
            "IMPRESSION" => Some(SegmentName::Impression),
            "ASSESSMENT" => Some(SegmentName::Assessment),
            _ => None,
        }
    }
}

impl fmt::Display for SegmentName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SegmentName::Procedure => "PROCEDURE",
            SegmentName::PatientMeta => "PATIENT_META",
            SegmentName::ImageMeta => "IMAGE_META",
            SegmentName::Composition => "COMPOSITION",
            SegmentName::Findings => "FINDINGS",
            SegmentName::Impression => "IMPRESSION",
            SegmentName::Assessment => "ASSESSMENT",
        };
        f.write_str(s)
    }
}

/// Placeholders resolved from record fields rather than the meta map.
const FIXED_FIELDS: [&str; 4] = ["side", "view", "density", "birads"];

/// Keywords that carry clinical content and must never be maskable.
const CLINICAL: [&str; 5] = ["density", "birads", "findings", "impression", "cancer"];

#[derive(Debug, Clone)]
pub struct Segment {
    pub name: SegmentName,
    pub text: String,
}

#[derive(Debug, Clone)]
pub struct CaptionTemplate {
    pub segments: Vec<Segment>,
    /// Meta keywords masking may remove; everything else must resolve.
    pub maskable: BTreeSet<String>,
}

impl CaptionTemplate {
    /// Parse the template file format: blocks separated by blank lines, the
    /// first line of each block is the segment name, and an optional
    /// `[maskable]` footer lists maskable keywords (whitespace separated).
    pub fn parse(text: &str) -> Result<CaptionTemplate> {
        let mut segments = Vec::new();
        let mut maskable = BTreeSet::new();
        for block in text.split("\n\n") {
            let block = block.trim();
            if block.is_empty() {
                continue;
            }
            let (head, rest) = block.split_once('\n').unwrap_or((block, ""));
            if head.trim() == "[maskable]" {
                for word in rest.split_whitespace() {
                    maskable.insert(word.to_string());
                }
                continue;
            }
            let name = SegmentName::parse(head).ok_or_else(|| {
                MamaError::Template(format!("unknown segment name `{}`", head.trim()))
            })?;
            segments.push(Segment {
                name,
                text: rest.trim().replace('\n', " "),
            });
        }

        let names: Vec<SegmentName> = segments.iter().map(|s| s.name).collect();
        if names != SegmentName::ALL {
            return Err(MamaError::Template(format!(
                "template must contain the seven clinical sections in order, found {names:?}"
            )));
        }
        let placeholders = collect_placeholders(&segments)?;
        for kw in &maskable {
            if !placeholders.contains(kw) {
                return Err(MamaError::Template(format!(
                    "maskable keyword `{kw}` does not appear in any segment"
                )));
            }
            if CLINICAL.contains(&kw.as_str()) || FIXED_FIELDS.contains(&kw.as_str()) {
                return Err(MamaError::Template(format!(
                    "keyword `{kw}` is clinical or fixed and cannot be maskable"
                )));
            }
        }
        Ok(CaptionTemplate { segments, maskable })
    }

    /// All `{placeholder}` names appearing in the segments.
    pub fn placeholders(&self) -> Result<BTreeSet<String>> {
        collect_placeholders(&self.segments)
    }

    /// The template shipped with the crate.
    pub fn builtin() -> &'static CaptionTemplate {
        static BUILTIN: OnceLock<CaptionTemplate> = OnceLock::new();
        BUILTIN.get_or_init(|| {
            CaptionTemplate::parse(include_str!("../assets/structured_template.txt"))
                .expect("builtin template parses")
        })
    }
}

/// Placeholder names in one segment text, in appearance order.
fn placeholders_in(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(start) = rest.find('{') {
        let Some(len) = rest[start..].find('}') else {
            break;
        };
        out.push(rest[start + 1..start + len].to_string());
        rest = &rest[start + len + 1..];
    }
    out
}

fn collect_placeholders(segments: &[Segment]) -> Result<BTreeSet<String>> {
    let mut out = BTreeSet::new();
    for seg in segments {
        let mut rest = seg.text.as_str();
        while let Some(start) = rest.find('{') {
            let Some(len) = rest[start..].find('}') else {
                return Err(MamaError::Template(format!(
                    "unclosed placeholder in segment {}",
                    seg.name
                )));
            };
            let name = &rest[start + 1..start + len];
            if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                return Err(MamaError::Template(format!(
                    "invalid placeholder `{{{name}}}` in segment {}",
                    seg.name
                )));
            }
            out.insert(name.to_string());
            rest = &rest[start + len + 1..];
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CaptionStyle {
    Structured,
    ClipStyle,
    Tabular,
}

impl CaptionStyle {
    pub fn as_str(&self) -> &'static str {
        match self {
            CaptionStyle::Structured => "structured",
            CaptionStyle::ClipStyle => "clip",
            CaptionStyle::Tabular => "tabular",
        }
    }

    pub fn parse(s: &str) -> Option<CaptionStyle> {
        match s.trim().to_ascii_lowercase().as_str() {
            "structured" => Some(CaptionStyle::Structured),
            "clip" | "clip-style" | "clip_style" => Some(CaptionStyle::ClipStyle),
            "tabular" => Some(CaptionStyle::Tabular),
            _ => None,
        }
    }
}

/// Generated report text with sentence offsets and the masking record.
#[derive(Debug, Clone, PartialEq)]
pub struct Caption {
    pub text: String,
    /// Byte offsets (start, end), non-overlapping, covering all
    /// non-whitespace text in order.
    pub sentence_spans: Vec<(usize, usize)>,
    pub masked_keywords: BTreeSet<String>,
    pub style: CaptionStyle,
}

impl Caption {
    pub fn sentences(&self) -> impl Iterator<Item = &str> {
        self.sentence_spans
            .iter()
            .map(move |&(a, b)| &self.text[a..b])
    }

    pub fn sentence_count(&self) -> usize {
        self.sentence_spans.len()
    }
}

/// Options for structured caption construction beyond the defaults.
#[derive(Debug, Clone, Default)]
pub struct StructuredOpts {
    /// Segments to leave out entirely (used for zero-shot prompts).
    pub omit_segments: Vec<SegmentName>,
    /// Meta overrides applied before substitution, e.g. a class label
    /// standing in for `findings`.
    pub override_meta: Vec<(String, String)>,
}

/// Resolve a placeholder against the record, honoring overrides.
fn resolve<'a>(
    record: &'a ImageRecord,
    opts: &'a StructuredOpts,
    key: &str,
) -> Option<std::borrow::Cow<'a, str>> {
    use std::borrow::Cow;
    if let Some((_, v)) = opts.override_meta.iter().find(|(k, _)| k == key) {
        return Some(Cow::Borrowed(v.as_str()));
    }
    match key {
        "side" => Some(Cow::Borrowed(record.side.word())),
        "view" => Some(Cow::Borrowed(record.view.code())),
        "density" => Some(Cow::Borrowed(record.density.label())),
        "birads" => Some(Cow::Owned(record.birads.to_string())),
        _ => record.meta_value(key).map(Cow::Borrowed),
    }
}

/// Build the full structured caption. Each maskable keyword is masked
/// independently with probability `mask_prob`; a masked keyword's clause is
/// removed and the surrounding punctuation normalized. Clinical clauses are
/// untouched by masking.
pub fn build_structured_caption(
    record: &ImageRecord,
    template: &CaptionTemplate,
    mask_prob: f64,
    rng: &mut Rng,
) -> Result<Caption> {
    build_structured_caption_opts(record, template, mask_prob, rng, &StructuredOpts::default())
}

pub fn build_structured_caption_opts(
    record: &ImageRecord,
    template: &CaptionTemplate,
    mask_prob: f64,
    rng: &mut Rng,
    opts: &StructuredOpts,
) -> Result<Caption> {
    if !(0.0..=1.0).contains(&mask_prob) {
        return Err(MamaError::Config(format!(
            "mask_prob {mask_prob} outside [0, 1]"
        )));
    }

    // Draw the mask for every maskable keyword in template-appearance order
    // so the rng stream does not depend on the record.
    let mut masked = BTreeSet::new();
    let mut seen = BTreeSet::new();
    for seg in &template.segments {
        for kw in placeholders_in(&seg.text) {
            if template.maskable.contains(&kw) && seen.insert(kw.clone()) && rng.chance(mask_prob) {
                masked.insert(kw);
            }
        }
    }

    let mut sentences: Vec<String> = Vec::new();
    for seg in &template.segments {
        if opts.omit_segments.contains(&seg.name) {
            continue;
        }
        for sentence in split_sentence_texts(&seg.text) {
            let mut kept_clauses: Vec<String> = Vec::new();
            for clause in split_clauses(&sentence.body) {
                let mut text = String::new();
                let mut drop = false;
                let mut rest = clause.as_str();
                while let Some(start) = rest.find('{') {
                    let len = rest[start..].find('}').expect("validated template");
                    let key = &rest[start + 1..start + len];
                    text.push_str(&rest[..start]);
                    match resolve(record, opts, key) {
                        Some(value) => text.push_str(&value),
                        None if masked.contains(key) || template.maskable.contains(key) => {
                            // absent or masked meta: the clause goes away
                            drop = true;
                        }
                        None => {
                            return Err(MamaError::Template(format!(
                                "placeholder `{key}` is not resolvable from the record"
                            )));
                        }
                    }
                    if masked.contains(key) {
                        drop = true;
                    }
                    rest = &rest[start + len + 1..];
                }
                text.push_str(rest);
                if !drop {
                    kept_clauses.push(text.trim().to_string());
                }
            }
            if !kept_clauses.is_empty() {
                let mut body = kept_clauses.join(", ");
                capitalize_first(&mut body);
                body.push(sentence.terminal);
                sentences.push(body);
            }
        }
    }

    let text = sentences.join(" ");
    let sentence_spans = split_sentences(&text);
    Ok(Caption {
        text,
        sentence_spans,
        masked_keywords: masked,
        style: CaptionStyle::Structured,
    })
}

/// Single-sentence label caption.
pub fn build_clip_style_caption(record: &ImageRecord) -> Caption {
    let text = format!(
        "a mammogram with BI-RADS category {} and breast density {}.",
        record.birads,
        record.density.label()
    );
    let sentence_spans = split_sentences(&text);
    Caption {
        text,
        sentence_spans,
        masked_keywords: BTreeSet::new(),
        style: CaptionStyle::ClipStyle,
    }
}

/// Key/value lines for each populated field, no prose. Field order is the
/// fixed schema order followed by the record's meta column order.
pub fn build_tabular_caption(record: &ImageRecord) -> Caption {
    let mut lines: Vec<String> = vec![
        format!("side: {}", record.side.word()),
        format!("view: {}", record.view.code()),
        format!("density: {}", record.density.label()),
        format!("birads: {}", record.birads),
    ];
    if let Some(c) = record.cancer {
        lines.push(format!("cancer: {c}"));
    }
    for (k, v) in &record.meta {
        lines.push(format!("{k}: {v}"));
    }

    let text = lines.join("\n");
    let mut sentence_spans = Vec::new();
    let mut offset = 0usize;
    for line in &lines {
        sentence_spans.push((offset, offset + line.len()));
        offset += line.len() + 1;
    }
    Caption {
        text,
        sentence_spans,
        masked_keywords: BTreeSet::new(),
        style: CaptionStyle::Tabular,
    }
}

/// Split text into sentence spans at '.', '!' or '?' followed by whitespace
/// or end of text. Spans keep the terminal punctuation, never split inside
/// hyphenated tokens, and cover all non-whitespace text.
pub fn split_sentences(text: &str) -> Vec<(usize, usize)> {
    let bytes = text.as_bytes();
    let mut spans = Vec::new();
    let mut start: Option<usize> = None;
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        if start.is_none() && !c.is_whitespace() {
            start = Some(i);
        }
        if matches!(c, '.' | '!' | '?') {
            let at_end = i + 1 >= bytes.len();
            let before_ws = !at_end && (bytes[i + 1] as char).is_whitespace();
            if (at_end || before_ws) && start.is_some() {
                spans.push((start.take().unwrap(), i + 1));
            }
        }
        i += 1;
    }
    if let Some(s) = start {
        let end = text.trim_end().len();
        if end > s {
            spans.push((s, end));
        }
    }
    spans
}

struct SentenceText {
    body: String,
    terminal: char,
}

/// Sentence-level split of template text, separating the terminal character.
fn split_sentence_texts(text: &str) -> Vec<SentenceText> {
    split_sentences(text)
        .into_iter()
        .map(|(a, b)| {
            let raw = &text[a..b];
            let (body, terminal) = match raw.chars().last() {
                Some(t @ ('.' | '!' | '?')) => (&raw[..raw.len() - 1], t),
                _ => (raw, '.'),
            };
            SentenceText {
                body: body.to_string(),
                terminal,
            }
        })
        .collect()
}

/// Comma-level clauses within one sentence body.
fn split_clauses(body: &str) -> Vec<String> {
    body.split(',')
        .map(|c| c.trim().to_string())
        .filter(|c| !c.is_empty())
        .collect()
}

fn capitalize_first(s: &mut str) {
    if let Some(pos) = s.find(|c: char| c.is_ascii_alphabetic()) {
        s[pos..pos + 1].make_ascii_uppercase();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::{BiRads, Density, Side, View};

    fn test_record() -> ImageRecord {
        ImageRecord {
            image_id: "img1".into(),
            patient_id: "p1".into(),
            study_id: "s1".into(),
            side: Side::Left,
            view: View::Cc,
            meta: vec![
                ("procedure".into(), "digital 2d".into()),
                ("age".into(), "62".into()),
                ("race".into(), "group b".into()),
                ("machine".into(), "unit-3".into()),
                ("site".into(), "clinic east".into()),
                ("findings".into(), "spiculated mass".into()),
                ("impression".into(), "suspicious focal lesion".into()),
            ],
            density: Density::B,
            birads: BiRads::new(2).unwrap(),
            cancer: None,
            image_path: String::new(),
        }
    }

    #[test]
    fn builtin_template_parses_with_five_maskable() {
        let t = CaptionTemplate::builtin();
        assert_eq!(t.segments.len(), 7);
        assert_eq!(t.maskable.len(), 5);
        assert!(t.maskable.contains("age"));
        assert!(!t.maskable.contains("findings"));
    }

    #[test]
    fn template_rejects_clinical_maskable() {
        let text = "PROCEDURE\nA {procedure}.\n\nPATIENT_META\nB.\n\nIMAGE_META\nC.\n\n\
                    COMPOSITION\nD {density}.\n\nFINDINGS\nE {findings}.\n\nIMPRESSION\nF.\n\n\
                    ASSESSMENT\nG {birads}.\n\n[maskable]\nfindings\n";
        assert!(matches!(
            CaptionTemplate::parse(text),
            Err(MamaError::Template(_))
        ));
    }

    #[test]
    fn template_rejects_wrong_section_order() {
        let text = "PATIENT_META\nA.\n\nPROCEDURE\nB.\n";
        assert!(CaptionTemplate::parse(text).is_err());
    }

    #[test]
    fn no_masking_keeps_every_value() {
        let record = test_record();
        let mut rng = Rng::new(0);
        let c =
            build_structured_caption(&record, CaptionTemplate::builtin(), 0.0, &mut rng).unwrap();
        assert!(c.masked_keywords.is_empty());
        for (_, v) in &record.meta {
            assert!(c.text.contains(v), "missing `{v}` in: {}", c.text);
        }
        assert!(c.text.contains("left"));
        assert!(c.text.contains("CC"));
        assert!(c.text.contains("category B"));
        assert!(c.text.contains("BI-RADS category 2"));
    }

    #[test]
    fn full_masking_removes_meta_keeps_clinical() {
        let record = test_record();
        let mut rng = Rng::new(0);
        let c =
            build_structured_caption(&record, CaptionTemplate::builtin(), 1.0, &mut rng).unwrap();
        assert_eq!(c.masked_keywords.len(), 5);
        for kw in ["62", "group b", "unit-3", "digital 2d", "clinic east"] {
            assert!(!c.text.contains(kw), "masked value `{kw}` in: {}", c.text);
        }
        assert!(c.text.contains("spiculated mass"));
        assert!(c.text.contains("category B"));
        assert!(c.text.contains("BI-RADS category 2"));
    }

    #[test]
    fn masking_preserves_clinical_clauses_for_any_seed() {
        let record = test_record();
        let mut rng = Rng::new(1);
        let base =
            build_structured_caption(&record, CaptionTemplate::builtin(), 0.0, &mut rng).unwrap();
        let density_sentence = base
            .sentences()
            .find(|s| s.contains("category B"))
            .unwrap()
            .to_string();
        let birads_sentence = base
            .sentences()
            .find(|s| s.contains("BI-RADS"))
            .unwrap()
            .to_string();
        for seed in 0..200 {
            let mut rng = Rng::new(seed);
            let c = build_structured_caption(&record, CaptionTemplate::builtin(), 0.8, &mut rng)
                .unwrap();
            assert!(c.text.contains(&density_sentence));
            assert!(c.text.contains(&birads_sentence));
        }
    }

    #[test]
    fn empirical_mask_rate_converges() {
        let record = test_record();
        let mut rng = Rng::new(7);
        let n = 4000;
        let mut count_age = 0usize;
        for _ in 0..n {
            let c = build_structured_caption(&record, CaptionTemplate::builtin(), 0.3, &mut rng)
                .unwrap();
            if c.masked_keywords.contains("age") {
                count_age += 1;
            }
        }
        let rate = count_age as f64 / n as f64;
        assert!((rate - 0.3).abs() < 0.03, "rate {rate}");
    }

    #[test]
    fn absent_meta_drops_clause_without_error() {
        let mut record = test_record();
        record.meta.retain(|(k, _)| k != "age");
        let mut rng = Rng::new(0);
        let c =
            build_structured_caption(&record, CaptionTemplate::builtin(), 0.0, &mut rng).unwrap();
        assert!(!c.text.contains("years old"));
        assert!(c.text.contains("group b"));
    }

    #[test]
    fn absent_clinical_meta_is_a_template_error() {
        let mut record = test_record();
        record.meta.retain(|(k, _)| k != "findings");
        let mut rng = Rng::new(0);
        match build_structured_caption(&record, CaptionTemplate::builtin(), 0.0, &mut rng) {
            Err(MamaError::Template(msg)) => assert!(msg.contains("findings"), "{msg}"),
            other => panic!("expected template error, got {other:?}"),
        }
    }

    #[test]
    fn clip_style_caption_matches_expected_form() {
        let record = test_record();
        let c = build_clip_style_caption(&record);
        assert_eq!(
            c.text,
            "a mammogram with BI-RADS category 2 and breast density B."
        );
        assert_eq!(c.sentence_count(), 1);
        let c2 = build_clip_style_caption(&record);
        assert_eq!(c.text, c2.text);
    }

    #[test]
    fn tabular_caption_lists_fields_in_schema_order() {
        let record = test_record();
        let c = build_tabular_caption(&record);
        let lines: Vec<&str> = c.sentences().collect();
        assert_eq!(lines[0], "side: left");
        assert_eq!(lines[1], "view: CC");
        assert_eq!(lines[2], "density: B");
        assert_eq!(lines[3], "birads: 2");
        assert_eq!(lines[4], "procedure: digital 2d");
        assert_eq!(lines.len(), 4 + record.meta.len());
    }

    #[test]
    fn tabular_empty_meta_emits_only_clinical_fields() {
        let mut record = test_record();
        record.meta.clear();
        let c = build_tabular_caption(&record);
        assert_eq!(c.sentence_count(), 4);
    }

    #[test]
    fn structured_contains_everything_tabular_emits() {
        let record = test_record();
        let mut rng = Rng::new(0);
        let s =
            build_structured_caption(&record, CaptionTemplate::builtin(), 0.0, &mut rng).unwrap();
        let t = build_tabular_caption(&record);
        for line in t.sentences() {
            let value = line.split_once(": ").unwrap().1;
            assert!(s.text.contains(value), "missing `{value}` in: {}", s.text);
        }
    }

    #[test]
    fn split_sentences_basic() {
        assert_eq!(split_sentences("A. B."), vec![(0, 2), (3, 5)]);
        assert_eq!(split_sentences(""), Vec::<(usize, usize)>::new());
    }

    #[test]
    fn split_sentences_keeps_hyphenated_tokens() {
        let spans = split_sentences("BI-RADS 2. No mass.");
        assert_eq!(spans.len(), 2);
        assert_eq!(&"BI-RADS 2. No mass."[spans[0].0..spans[0].1], "BI-RADS 2.");
        assert_eq!(&"BI-RADS 2. No mass."[spans[1].0..spans[1].1], "No mass.");
    }

    #[test]
    fn split_sentences_covers_trailing_text() {
        let text = "No terminal punctuation here";
        let spans = split_sentences(text);
        assert_eq!(spans, vec![(0, text.len())]);
        // decimal point inside a number does not split
        let spans = split_sentences("value 3.5 stays. done.");
        assert_eq!(spans.len(), 2);
    }

    #[test]
    fn spans_cover_all_non_whitespace() {
        let record = test_record();
        let mut rng = Rng::new(3);
        for mask in [0.0, 0.5, 1.0] {
            let c = build_structured_caption(&record, CaptionTemplate::builtin(), mask, &mut rng)
                .unwrap();
            let mut covered = vec![false; c.text.len()];
            let mut last_end = 0;
            for &(a, b) in &c.sentence_spans {
                assert!(a >= last_end, "overlapping or unordered spans");
                assert!(b > a, "empty span");
                last_end = b;
                covered[a..b].iter_mut().for_each(|x| *x = true);
            }
            for (i, ch) in c.text.char_indices() {
                if !ch.is_whitespace() {
                    assert!(covered[i], "byte {i} ({ch}) uncovered in: {}", c.text);
                }
            }
        }
    }

    #[test]
    fn omitted_segments_for_prompts() {
        let record = test_record();
        let mut rng = Rng::new(0);
        let opts = StructuredOpts {
            omit_segments: vec![
                SegmentName::Composition,
                SegmentName::Impression,
                SegmentName::Assessment,
            ],
            override_meta: vec![("findings".into(), "round calcification".into())],
        };
        let c = build_structured_caption_opts(
            &record,
            CaptionTemplate::builtin(),
            0.0,
            &mut rng,
            &opts,
        )
        .unwrap();
        assert!(c.text.contains("round calcification"));
        assert!(!c.text.contains("BI-RADS"));
        assert!(!c.text.contains("category B"));
        assert!(!c.text.contains("Impression"));
    }
}
