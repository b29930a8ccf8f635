//! Records, studies, dataset splits and fraction subsampling.
//!
//! Ingest is CSV with a header row. Required logical columns: `image_id`,
//! `patient_id`, `study_id`, `side` (L/R), `view` (CC/MLO), `density` (A-D or
//! 1-4), `birads` (0-6). `image_path` and `cancer` are recognized when
//! present; every other column becomes a meta keyword.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::error::{MamaError, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub fn parse(s: &str) -> Option<Side> {
        match s.trim().to_ascii_uppercase().as_str() {
            "L" | "LEFT" => Some(Side::Left),
            "R" | "RIGHT" => Some(Side::Right),
            _ => None,
        }
    }

    /// Short form used in CSV output.
    pub fn code(&self) -> &'static str {
        match self {
            Side::Left => "L",
            Side::Right => "R",
        }
    }

    /// Word used in caption text.
    pub fn word(&self) -> &'static str {
        match self {
            Side::Left => "left",
            Side::Right => "right",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum View {
    Cc,
    Mlo,
}

impl View {
    pub fn parse(s: &str) -> Option<View> {
        match s.trim().to_ascii_uppercase().as_str() {
            "CC" => Some(View::Cc),
            "MLO" => Some(View::Mlo),
            _ => None,
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            View::Cc => "CC",
            View::Mlo => "MLO",
        }
    }
}

/// Four-category breast composition label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Density {
    A,
    B,
    C,
    D,
}

impl Density {
    pub const COUNT: usize = 4;

    pub fn parse(s: &str) -> Option<Density> {
        match s.trim().to_ascii_uppercase().as_str() {
            "A" | "1" => Some(Density::A),
            "B" | "2" => Some(Density::B),
            "C" | "3" => Some(Density::C),
            "D" | "4" => Some(Density::D),
            _ => None,
        }
    }

    pub fn from_index(i: usize) -> Option<Density> {
        [Density::A, Density::B, Density::C, Density::D]
            .get(i)
            .copied()
    }

    pub fn index(&self) -> usize {
        *self as usize
    }

    pub fn label(&self) -> &'static str {
        match self {
            Density::A => "A",
            Density::B => "B",
            Density::C => "C",
            Density::D => "D",
        }
    }
}

/// Seven-category assessment label, domain 0-6.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BiRads(u8);

impl BiRads {
    pub const COUNT: usize = 7;

    pub fn new(value: u8) -> Result<BiRads> {
        if value <= 6 {
            Ok(BiRads(value))
        } else {
            Err(MamaError::Input(format!(
                "BI-RADS value {value} outside 0-6"
            )))
        }
    }

    pub fn parse(s: &str) -> Option<BiRads> {
        s.trim().parse::<u8>().ok().filter(|&v| v <= 6).map(BiRads)
    }

    pub fn value(&self) -> u8 {
        self.0
    }

    pub fn index(&self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for BiRads {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// One mammogram's tabular annotation. `meta` preserves CSV column order so
/// downstream caption styles emit fields deterministically.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub image_id: String,
    pub patient_id: String,
    pub study_id: String,
    pub side: Side,
    pub view: View,
    pub meta: Vec<(String, String)>,
    pub density: Density,
    pub birads: BiRads,
    pub cancer: Option<bool>,
    pub image_path: String,
}

impl ImageRecord {
    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }
}

/// All images from one patient imaging session.
#[derive(Debug, Clone, PartialEq)]
pub struct Study {
    pub study_id: String,
    pub patient_id: String,
    pub images: Vec<ImageRecord>,
}

/// Patient-level split fractions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(train_frac: f64, val_frac: f64, test_frac: f64, seed: u64) -> Result<SplitSpec> {
        let spec = SplitSpec {
            train_frac,
            val_frac,
            test_frac,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let fr = [self.train_frac, self.val_frac, self.test_frac];
        if fr.iter().any(|f| !f.is_finite() || *f < 0.0) {
            return Err(MamaError::Config(
                "split fractions must be non-negative".into(),
            ));
        }
        let sum: f64 = fr.iter().sum();
        if sum <= 0.0 {
            return Err(MamaError::Config("split fractions are all zero".into()));
        }
        if (sum - 1.0).abs() > 1e-9 {
            return Err(MamaError::Config(format!(
                "split fractions sum to {sum}, expected 1"
            )));
        }
        Ok(())
    }
}

/// Logical-field to column-name mapping for CSV ingest.
#[derive(Debug, Clone)]
pub struct CsvSchema {
    pub image_id: String,
    pub patient_id: String,
    pub study_id: String,
    pub side: String,
    pub view: String,
    pub density: String,
    pub birads: String,
    /// Recognized but optional; never treated as meta.
    pub image_path: String,
    pub cancer: String,
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema {
            image_id: "image_id".into(),
            patient_id: "patient_id".into(),
            study_id: "study_id".into(),
            side: "side".into(),
            view: "view".into(),
            density: "density".into(),
            birads: "birads".into(),
            image_path: "image_path".into(),
            cancer: "cancer".into(),
        }
    }
}

/// Parse CSV text into records. Row indices in errors are 1-based over data
/// rows. Empty meta values are stored as absent.
pub fn parse_records(csv_text: &str, schema: &CsvSchema) -> Result<Vec<ImageRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(csv_text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| MamaError::Schema(format!("cannot read header row: {e}")))?
        .clone();

    let col = |name: &str| headers.iter().position(|h| h == name);
    let required = |name: &str| {
        col(name).ok_or_else(|| MamaError::Schema(format!("missing required column `{name}`")))
    };

    let idx_image_id = required(&schema.image_id)?;
    let idx_patient_id = required(&schema.patient_id)?;
    let idx_study_id = required(&schema.study_id)?;
    let idx_side = required(&schema.side)?;
    let idx_view = required(&schema.view)?;
    let idx_density = required(&schema.density)?;
    let idx_birads = required(&schema.birads)?;
    let idx_image_path = col(&schema.image_path);
    let idx_cancer = col(&schema.cancer);

    let reserved: Vec<usize> = [
        Some(idx_image_id),
        Some(idx_patient_id),
        Some(idx_study_id),
        Some(idx_side),
        Some(idx_view),
        Some(idx_density),
        Some(idx_birads),
        idx_image_path,
        idx_cancer,
    ]
    .into_iter()
    .flatten()
    .collect();

    let mut records = Vec::new();
    let mut seen_ids = BTreeSet::new();
    for (i, row) in reader.records().enumerate() {
        let rownum = i + 1;
        let row = row.map_err(|e| MamaError::Row {
            row: rownum,
            message: format!("malformed CSV row: {e}"),
        })?;
        let field = |idx: usize| row.get(idx).unwrap_or("").trim().to_string();
        let row_err = |message: String| MamaError::Row {
            row: rownum,
            message,
        };

        let image_id = field(idx_image_id);
        if image_id.is_empty() {
            return Err(row_err("empty image_id".into()));
        }
        if !seen_ids.insert(image_id.clone()) {
            return Err(row_err(format!("duplicate image_id `{image_id}`")));
        }
        let side = Side::parse(&field(idx_side))
            .ok_or_else(|| row_err(format!("invalid side `{}`", field(idx_side))))?;
        let view = View::parse(&field(idx_view))
            .ok_or_else(|| row_err(format!("invalid view `{}`", field(idx_view))))?;
        let density = Density::parse(&field(idx_density))
            .ok_or_else(|| row_err(format!("invalid density `{}`", field(idx_density))))?;
        let birads = BiRads::parse(&field(idx_birads))
            .ok_or_else(|| row_err(format!("invalid birads `{}`", field(idx_birads))))?;
        let cancer = match idx_cancer.map(field).as_deref() {
            None | Some("") => None,
            Some("0") | Some("false") | Some("FALSE") | Some("False") => Some(false),
            Some("1") | Some("true") | Some("TRUE") | Some("True") => Some(true),
            Some(other) => return Err(row_err(format!("invalid cancer flag `{other}`"))),
        };

        let mut meta = Vec::new();
        for (j, value) in row.iter().enumerate() {
            if reserved.contains(&j) || j >= headers.len() {
                continue;
            }
            let value = value.trim();
            if !value.is_empty() {
                meta.push((headers[j].to_string(), value.to_string()));
            }
        }

        records.push(ImageRecord {
            image_id,
            patient_id: field(idx_patient_id),
            study_id: field(idx_study_id),
            side,
            view,
            meta,
            density,
            birads,
            cancer,
            image_path: idx_image_path.map(field).unwrap_or_default(),
        });
    }
    Ok(records)
}

/// Partition records by (patient_id, study_id). Studies come back sorted by
/// that key; images within a study are sorted by (side, view, image_id).
pub fn group_studies(records: &[ImageRecord]) -> Vec<Study> {
    let mut groups: BTreeMap<(String, String), Vec<ImageRecord>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.patient_id.clone(), r.study_id.clone()))
            .or_default()
            .push(r.clone());
    }
    groups
        .into_iter()
        .map(|((patient_id, study_id), mut images)| {
            images
                .sort_by(|a, b| (a.side, a.view, &a.image_id).cmp(&(b.side, b.view, &b.image_id)));
            Study {
                study_id,
                patient_id,
                images,
            }
        })
        .collect()
}

/// Patient-disjoint split by shuffled order with largest-remainder targets.
pub fn split_patients(
    studies: &[Study],
    spec: &SplitSpec,
) -> Result<(Vec<Study>, Vec<Study>, Vec<Study>)> {
    spec.validate()?;
    if studies.is_empty() {
        return Err(MamaError::Input("no studies to split".into()));
    }

    let mut patients: Vec<&str> = studies
        .iter()
        .map(|s| s.patient_id.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut rng = Rng::new(spec.seed);
    rng.shuffle(&mut patients);

    let n = patients.len();
    let fractions = [spec.train_frac, spec.val_frac, spec.test_frac];
    let mut counts = [0usize; 3];
    let mut remainders: Vec<(usize, f64)> = Vec::new();
    let mut assigned = 0usize;
    for (k, f) in fractions.iter().enumerate() {
        let target = f * n as f64;
        counts[k] = target.floor() as usize;
        assigned += counts[k];
        remainders.push((k, target - target.floor()));
    }
    // Largest remainder first; ties break toward train, then val.
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for (k, _) in remainders.iter().take(n - assigned) {
        counts[*k] += 1;
    }

    let mut membership: BTreeMap<&str, usize> = BTreeMap::new();
    let mut cursor = 0usize;
    for (k, &count) in counts.iter().enumerate() {
        for p in &patients[cursor..cursor + count] {
            membership.insert(p, k);
        }
        cursor += count;
    }

    let mut out: [Vec<Study>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for s in studies {
        out[membership[s.patient_id.as_str()]].push(s.clone());
    }
    let [train, val, test] = out;
    Ok((train, val, test))
}

/// Deterministic subsample of studies without replacement. Counts use
/// round-half-up of fraction*N with a minimum of 1; fraction 1 is identity.
pub fn subsample_fraction(studies: &[Study], fraction: f64, seed: u64) -> Result<Vec<Study>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(MamaError::Config(format!(
            "subsample fraction {fraction} outside (0, 1]"
        )));
    }
    if fraction == 1.0 {
        return Ok(studies.to_vec());
    }
    let n = studies.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let count = ((fraction * n as f64 + 0.5).floor() as usize).clamp(1, n);
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = Rng::new(seed);
    rng.shuffle(&mut idx);
    let mut chosen: Vec<usize> = idx[..count].to_vec();
    chosen.sort_unstable();
    Ok(chosen.into_iter().map(|i| studies[i].clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(patient: &str, study: &str, image: &str, side: Side, view: View) -> ImageRecord {
        ImageRecord {
            image_id: image.into(),
            patient_id: patient.into(),
            study_id: study.into(),
            side,
            view,
            meta: Vec::new(),
            density: Density::B,
            birads: BiRads::new(1).unwrap(),
            cancer: None,
            image_path: String::new(),
        }
    }

    fn studies_for(n_patients: usize) -> Vec<Study> {
        (0..n_patients)
            .map(|p| Study {
                study_id: format!("s{p}"),
                patient_id: format!("p{p}"),
                images: vec![record(
                    &format!("p{p}"),
                    &format!("s{p}"),
                    &format!("i{p}"),
                    Side::Left,
                    View::Cc,
                )],
            })
            .collect()
    }

    #[test]
    fn parse_single_row() {
        let csv = "image_id,patient_id,study_id,side,view,density,birads,age\n\
                   img1,p1,s1,L,CC,B,2,62\n";
        let records = parse_records(csv, &CsvSchema::default()).unwrap();
        assert_eq!(records.len(), 1);
        let r = &records[0];
        assert_eq!(r.side, Side::Left);
        assert_eq!(r.view, View::Cc);
        assert_eq!(r.birads.index(), 2);
        assert_eq!(r.density, Density::B);
        assert_eq!(r.meta_value("age"), Some("62"));
    }

    #[test]
    fn parse_header_only() {
        let csv = "image_id,patient_id,study_id,side,view,density,birads\n";
        let records = parse_records(csv, &CsvSchema::default()).unwrap();
        assert!(records.is_empty());
    }

    #[test]
    fn parse_rejects_birads_out_of_domain() {
        let csv = "image_id,patient_id,study_id,side,view,density,birads\n\
                   img1,p1,s1,L,CC,B,9\n";
        match parse_records(csv, &CsvSchema::default()) {
            Err(MamaError::Row { row, message }) => {
                assert_eq!(row, 1);
                assert!(message.contains("birads"), "{message}");
            }
            other => panic!("expected row error, got {other:?}"),
        }
    }

    #[test]
    fn parse_rejects_missing_column() {
        let csv = "image_id,patient_id,study_id,side,view,density\nimg1,p1,s1,L,CC,B\n";
        match parse_records(csv, &CsvSchema::default()) {
            Err(MamaError::Schema(msg)) => assert!(msg.contains("birads"), "{msg}"),
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn parse_accepts_numeric_density_and_quoted_fields() {
        let csv = "image_id,patient_id,study_id,side,view,density,birads,note\n\
                   img1,p1,s1,R,MLO,3,0,\"hello, world\"\n";
        let records = parse_records(csv, &CsvSchema::default()).unwrap();
        assert_eq!(records[0].density, Density::C);
        assert_eq!(records[0].meta_value("note"), Some("hello, world"));
    }

    #[test]
    fn parse_empty_meta_is_absent() {
        let csv = "image_id,patient_id,study_id,side,view,density,birads,age\n\
                   img1,p1,s1,L,CC,A,1,\n";
        let records = parse_records(csv, &CsvSchema::default()).unwrap();
        assert_eq!(records[0].meta_value("age"), None);
    }

    #[test]
    fn group_four_views_single_study() {
        let records = vec![
            record("p1", "s1", "i3", Side::Right, View::Cc),
            record("p1", "s1", "i1", Side::Left, View::Cc),
            record("p1", "s1", "i4", Side::Right, View::Mlo),
            record("p1", "s1", "i2", Side::Left, View::Mlo),
        ];
        let studies = group_studies(&records);
        assert_eq!(studies.len(), 1);
        let ids: Vec<&str> = studies[0]
            .images
            .iter()
            .map(|r| r.image_id.as_str())
            .collect();
        assert_eq!(ids, vec!["i1", "i2", "i3", "i4"]);
    }

    #[test]
    fn group_splits_patients() {
        let records = vec![
            record("p1", "s1", "i1", Side::Left, View::Cc),
            record("p2", "s1", "i2", Side::Left, View::Cc),
        ];
        assert_eq!(group_studies(&records).len(), 2);
    }

    #[test]
    fn group_duplicate_views_ordered_by_image_id() {
        // Hand-applied sort: all (Left, CC) so image_id decides: i1, i5, i9.
        let records = vec![
            record("p1", "s1", "i9", Side::Left, View::Cc),
            record("p1", "s1", "i1", Side::Left, View::Cc),
            record("p1", "s1", "i5", Side::Left, View::Cc),
        ];
        let studies = group_studies(&records);
        assert_eq!(studies.len(), 1);
        let ids: Vec<&str> = studies[0]
            .images
            .iter()
            .map(|r| r.image_id.as_str())
            .collect();
        assert_eq!(ids, vec!["i1", "i5", "i9"]);
    }

    #[test]
    fn split_ten_patients_exact() {
        let studies = studies_for(10);
        let spec = SplitSpec::new(0.7, 0.1, 0.2, 0).unwrap();
        let (train, val, test) = split_patients(&studies, &spec).unwrap();
        assert_eq!((train.len(), val.len(), test.len()), (7, 1, 2));
    }

    #[test]
    fn split_single_patient_goes_to_train() {
        // Largest remainder: 0.7 wins the single slot.
        let studies = studies_for(1);
        let spec = SplitSpec::new(0.7, 0.1, 0.2, 3).unwrap();
        let (train, val, test) = split_patients(&studies, &spec).unwrap();
        assert_eq!((train.len(), val.len(), test.len()), (1, 0, 0));
    }

    #[test]
    fn split_deterministic_and_patient_disjoint() {
        let mut studies = studies_for(23);
        // two studies per patient for a few patients
        for p in 0..5 {
            studies.push(Study {
                study_id: format!("s{p}b"),
                patient_id: format!("p{p}"),
                images: vec![record(
                    &format!("p{p}"),
                    &format!("s{p}b"),
                    &format!("ib{p}"),
                    Side::Right,
                    View::Mlo,
                )],
            });
        }
        for seed in 0..20 {
            let spec = SplitSpec::new(0.7, 0.1, 0.2, seed).unwrap();
            let a = split_patients(&studies, &spec).unwrap();
            let b = split_patients(&studies, &spec).unwrap();
            assert_eq!(a, b, "determinism at seed {seed}");
            let (train, val, test) = a;
            let pats = |xs: &[Study]| -> BTreeSet<String> {
                xs.iter().map(|s| s.patient_id.clone()).collect()
            };
            let (tp, vp, ep) = (pats(&train), pats(&val), pats(&test));
            assert!(tp.is_disjoint(&vp) && tp.is_disjoint(&ep) && vp.is_disjoint(&ep));
            assert_eq!(tp.len() + vp.len() + ep.len(), 23);
        }
    }

    #[test]
    fn split_rejects_zero_fractions() {
        assert!(SplitSpec::new(0.0, 0.0, 0.0, 0).is_err());
    }

    #[test]
    fn subsample_identity_at_one() {
        let studies = studies_for(7);
        let out = subsample_fraction(&studies, 1.0, 9).unwrap();
        assert_eq!(out, studies);
    }

    #[test]
    fn subsample_exact_count() {
        let studies = studies_for(100);
        let out = subsample_fraction(&studies, 0.1, 0).unwrap();
        assert_eq!(out.len(), 10);
    }

    #[test]
    fn subsample_rounds_half_up() {
        // round(3.5) = 4 under round-half-up
        let studies = studies_for(7);
        let out = subsample_fraction(&studies, 0.5, 0).unwrap();
        assert_eq!(out.len(), 4);
    }

    #[test]
    fn subsample_minimum_one_and_deterministic() {
        let studies = studies_for(35);
        let a = subsample_fraction(&studies, 0.01, 5).unwrap();
        let b = subsample_fraction(&studies, 0.01, 5).unwrap();
        assert_eq!(a.len(), 1);
        assert_eq!(a, b);
        assert!(subsample_fraction(&studies, 0.0, 5).is_err());
        assert!(subsample_fraction(&studies, 1.1, 5).is_err());
    }
}
