//! Contrastive objectives: the multi-view visual InfoNCE, the symmetric
//! visual-text loss, the sentence-patch correspondence machinery with its
//! local InfoNCE, and the scheduled total objective.
//!
//! Every loss exists in two forms that share one code path: a graph builder
//! returning a scalar node (used by the trainer and the gradient checks) and
//! a value-level wrapper that assembles a fresh graph and returns the
//! number. Logits always go through max-subtracted softmaxes.

use crate::error::{MamaError, Result};
use crate::graph::{Graph, NodeId};
use crate::mat::Mat;

/// Loss temperatures. `tau2` is the learnable CLIP temperature; the other
/// two stay fixed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Temperatures {
    pub tau1: f64,
    pub tau2: f64,
    pub tau_local: f64,
}

impl Default for Temperatures {
    fn default() -> Self {
        Temperatures {
            tau1: 0.5,
            tau2: 0.07,
            tau_local: 0.1,
        }
    }
}

/// Clamp range applied to tau2 after each update.
pub const TAU2_MIN: f64 = 1e-3;
pub const TAU2_MAX: f64 = 1.0;

impl Temperatures {
    pub fn validate(&self) -> Result<()> {
        for (name, t) in [
            ("tau1", self.tau1),
            ("tau2", self.tau2),
            ("tau_local", self.tau_local),
        ] {
            if !(t.is_finite() && t > 0.0) {
                return Err(MamaError::Config(format!(
                    "temperature {name} must be strictly positive, got {t}"
                )));
            }
        }
        Ok(())
    }
}

/// Which negatives the visual InfoNCE uses. `PrimaryOnly` keeps first-view
/// negatives plus the positive; `AllViews` is the full two-view variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum VvNegatives {
    #[default]
    PrimaryOnly,
    AllViews,
}

impl VvNegatives {
    pub fn parse(s: &str) -> Option<VvNegatives> {
        match s.trim().to_ascii_lowercase().as_str() {
            "primary_only" | "primary-only" => Some(VvNegatives::PrimaryOnly),
            "all_views" | "all-views" => Some(VvNegatives::AllViews),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            VvNegatives::PrimaryOnly => "primary_only",
            VvNegatives::AllViews => "all_views",
        }
    }
}

/// Per-(image, report) sentence-by-patch cosine similarities.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceMatrix {
    /// S x P cosine values in [-1, 1].
    pub values: Mat,
    /// true = real sentence; masked rows are excluded from aggregation.
    pub sentence_mask: Vec<bool>,
}

impl CorrespondenceMatrix {
    pub fn with_mask(mut self, sentence_mask: Vec<bool>) -> Result<Self> {
        if sentence_mask.len() != self.values.rows() {
            return Err(MamaError::Shape(format!(
                "mask length {} vs {} sentences",
                sentence_mask.len(),
                self.values.rows()
            )));
        }
        self.sentence_mask = sentence_mask;
        Ok(self)
    }
}

/// The four loss terms of the pre-training objective plus the active
/// schedule weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l_vv: f64,
    pub l_vt_primary: f64,
    pub l_vt_positive: f64,
    pub l_local_v: f64,
    pub l_local_t: f64,
    pub w: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Residual of the defining identity; zero up to rounding.
    pub fn identity_gap(&self) -> f64 {
        let expect = self.l_vv
            + self.l_vt_primary
            + self.l_vt_positive
            + self.w * (self.l_local_v + self.l_local_t) / 2.0;
        (self.total - expect).abs()
    }

    pub fn is_finite(&self) -> bool {
        [
            self.l_vv,
            self.l_vt_primary,
            self.l_vt_positive,
            self.l_local_v,
            self.l_local_t,
            self.w,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

fn validate_unit_rows(name: &str, m: &Mat) -> Result<()> {
    if !m.is_finite() {
        return Err(MamaError::Numeric(format!(
            "{name} contains non-finite values"
        )));
    }
    for i in 0..m.rows() {
        let n = m.row_norm(i);
        if (n - 1.0).abs() > 1e-5 {
            return Err(MamaError::Input(format!(
                "{name} row {i} has norm {n}, expected unit rows"
            )));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// graph builders
// ---------------------------------------------------------------------------

/// Multi-view visual InfoNCE over unit-row batches (B x d).
/// The positive similarity replaces the self-similarity on the diagonal;
/// `AllViews` additionally appends the positive view's columns as negatives.
pub fn info_nce_vv_node(
    g: &mut Graph,
    v: NodeId,
    v_pos: NodeId,
    tau1: f64,
    variant: VvNegatives,
) -> NodeId {
    let b = g.value(v).rows();
    let sims = g.matmul_nt(v, v);
    let pos = g.row_dot(v, v_pos);
    let logits = match variant {
        VvNegatives::PrimaryOnly => g.set_diag(sims, pos),
        VvNegatives::AllViews => {
            let cross = g.matmul_nt(v, v_pos);
            g.concat_cols(sims, cross)
        }
    };
    let scaled = g.scale(logits, 1.0 / tau1);
    let (mask, offset) = match variant {
        VvNegatives::PrimaryOnly => (None, 0),
        VvNegatives::AllViews => {
            // exclude the self column in the left half
            let mut m = vec![true; b * 2 * b];
            for i in 0..b {
                m[i * 2 * b + i] = false;
            }
            (Some(std::rc::Rc::new(m)), b)
        }
    };
    let ls = g.log_softmax_rows(scaled, mask);
    let dm = g.diag_mean(ls, offset);
    g.scale(dm, -1.0)
}

/// Symmetric CLIP loss at the learnable temperature node (1x1).
pub fn clip_vt_node(g: &mut Graph, v: NodeId, t: NodeId, tau2: NodeId) -> NodeId {
    let sims = g.matmul_nt(v, t);
    let inv = g.recip(tau2);
    let logits = g.mul_scalar(sims, inv);
    let fwd = g.log_softmax_rows(logits, None);
    let a = g.diag_mean(fwd, 0);
    let logits_t = g.transpose(logits);
    let bwd = g.log_softmax_rows(logits_t, None);
    let b = g.diag_mean(bwd, 0);
    let sum = g.add(a, b);
    g.scale(sum, -0.5)
}

/// Aggregated local scores for every (image i, report j) pair.
/// Inputs are unit-row feature nodes; returns (c_v, c_t), both B x B with
/// images on rows and reports on columns.
pub fn local_scores_node(
    g: &mut Graph,
    sentence_feats: &[NodeId],
    patch_feats: &[NodeId],
) -> (NodeId, NodeId) {
    let b = sentence_feats.len();
    assert_eq!(b, patch_feats.len(), "batch sizes");
    let mut cv = Vec::with_capacity(b * b);
    let mut ct = Vec::with_capacity(b * b);
    for &p in patch_feats {
        for &s in sentence_feats {
            // sentences of report j against patches of image i
            let c = g.matmul_nt(s, p);
            let rm = g.row_max(c);
            cv.push(g.mean_all(rm));
            let cm = g.col_max(c);
            ct.push(g.mean_all(cm));
        }
    }
    (g.stack_scalars(&cv, b, b), g.stack_scalars(&ct, b, b))
}

/// Bidirectional InfoNCE over an aggregated score matrix.
fn score_info_nce(g: &mut Graph, scores: NodeId, tau: f64) -> NodeId {
    let scaled = g.scale(scores, 1.0 / tau);
    let fwd = g.log_softmax_rows(scaled, None);
    let a = g.diag_mean(fwd, 0);
    let t = g.transpose(scaled);
    let bwd = g.log_softmax_rows(t, None);
    let b = g.diag_mean(bwd, 0);
    let sum = g.add(a, b);
    g.scale(sum, -0.5)
}

/// The two halves of the local loss from aggregated score matrices.
pub fn local_loss_node(
    g: &mut Graph,
    c_v: NodeId,
    c_t: NodeId,
    tau_local: f64,
) -> (NodeId, NodeId) {
    (
        score_info_nce(g, c_v, tau_local),
        score_info_nce(g, c_t, tau_local),
    )
}

// ---------------------------------------------------------------------------
// value-level operations
// ---------------------------------------------------------------------------

/// Multi-view visual InfoNCE. Rows must be unit-norm; B >= 1.
pub fn info_nce_vv(v: &Mat, v_pos: &Mat, tau1: f64, variant: VvNegatives) -> Result<f64> {
    if v.rows() == 0 || v.shape() != v_pos.shape() {
        return Err(MamaError::Input(format!(
            "batch shapes {:?} vs {:?}",
            v.shape(),
            v_pos.shape()
        )));
    }
    validate_unit_rows("v", v)?;
    validate_unit_rows("v_pos", v_pos)?;
    if !(tau1.is_finite() && tau1 > 0.0) {
        return Err(MamaError::Config(format!("tau1 {tau1} must be positive")));
    }
    let mut g = Graph::new();
    let vn = g.input(v.clone());
    let pn = g.input(v_pos.clone());
    let loss = info_nce_vv_node(&mut g, vn, pn, tau1, variant);
    Ok(g.value(loss).item())
}

/// Symmetric CLIP loss between unit-row batches.
pub fn clip_vt(v: &Mat, t: &Mat, tau2: f64) -> Result<f64> {
    if v.rows() == 0 || v.shape() != t.shape() {
        return Err(MamaError::Input(format!(
            "batch shapes {:?} vs {:?}",
            v.shape(),
            t.shape()
        )));
    }
    validate_unit_rows("v", v)?;
    validate_unit_rows("t", t)?;
    if !(tau2.is_finite() && tau2 > 0.0) {
        return Err(MamaError::Config(format!("tau2 {tau2} must be positive")));
    }
    let mut g = Graph::new();
    let vn = g.input(v.clone());
    let tn = g.input(t.clone());
    let tau = g.input(Mat::scalar(tau2));
    let loss = clip_vt_node(&mut g, vn, tn, tau);
    Ok(g.value(loss).item())
}

/// Cosine similarities between sentence rows and patch rows.
pub fn correspondence_matrix(s: &Mat, p: &Mat) -> Result<CorrespondenceMatrix> {
    if s.cols() != p.cols() {
        return Err(MamaError::Shape(format!(
            "sentence dim {} vs patch dim {}",
            s.cols(),
            p.cols()
        )));
    }
    if !s.is_finite() || !p.is_finite() {
        return Err(MamaError::Numeric("non-finite features".into()));
    }
    let mut values = Mat::zeros(s.rows(), p.rows());
    for j in 0..s.rows() {
        let ns = s.row_norm(j);
        if ns <= 0.0 {
            return Err(MamaError::Numeric(format!(
                "sentence row {j} has zero norm"
            )));
        }
        for k in 0..p.rows() {
            let np = p.row_norm(k);
            if np <= 0.0 {
                return Err(MamaError::Numeric(format!("patch row {k} has zero norm")));
            }
            values.set(j, k, crate::mat::dot(s.row(j), p.row(k)) / (ns * np));
        }
    }
    let rows = values.rows();
    Ok(CorrespondenceMatrix {
        values,
        sentence_mask: vec![true; rows],
    })
}

/// Mean over unmasked sentences of the best-patch similarity.
pub fn visual_local_score(c: &CorrespondenceMatrix) -> Result<f64> {
    let live: Vec<usize> = (0..c.values.rows())
        .filter(|&j| c.sentence_mask[j])
        .collect();
    if live.is_empty() {
        return Err(MamaError::Input("all sentence rows are masked".into()));
    }
    let sum: f64 = live
        .iter()
        .map(|&j| {
            c.values
                .row(j)
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .sum();
    Ok(sum / live.len() as f64)
}

/// Mean over all patches of the best-sentence similarity.
pub fn text_local_score(c: &CorrespondenceMatrix) -> Result<f64> {
    let live: Vec<usize> = (0..c.values.rows())
        .filter(|&j| c.sentence_mask[j])
        .collect();
    if live.is_empty() {
        return Err(MamaError::Input("all sentence rows are masked".into()));
    }
    let p = c.values.cols();
    let mut sum = 0.0;
    for k in 0..p {
        sum += live
            .iter()
            .map(|&j| c.values.at(j, k))
            .fold(f64::NEG_INFINITY, f64::max);
    }
    Ok(sum / p as f64)
}

/// Local loss halves from per-sample raw features; rows are normalized
/// internally for the cosine form.
pub fn local_loss(
    sentence_feats: &[Mat],
    patch_feats: &[Mat],
    tau_local: f64,
) -> Result<(f64, f64)> {
    if sentence_feats.is_empty() || sentence_feats.len() != patch_feats.len() {
        return Err(MamaError::Input(format!(
            "batch sizes {} vs {}",
            sentence_feats.len(),
            patch_feats.len()
        )));
    }
    for (i, s) in sentence_feats.iter().enumerate() {
        if s.rows() == 0 {
            return Err(MamaError::Input(format!("report {i} has zero sentences")));
        }
    }
    for (i, p) in patch_feats.iter().enumerate() {
        if p.rows() == 0 {
            return Err(MamaError::Input(format!("image {i} has zero patches")));
        }
    }
    if !(tau_local.is_finite() && tau_local > 0.0) {
        return Err(MamaError::Config(format!(
            "tau_local {tau_local} must be positive"
        )));
    }
    let mut g = Graph::new();
    let mut s_nodes = Vec::new();
    let mut p_nodes = Vec::new();
    for s in sentence_feats {
        let n = g.input(s.clone());
        s_nodes.push(g.l2_normalize_rows(n)?);
    }
    for p in patch_feats {
        let n = g.input(p.clone());
        p_nodes.push(g.l2_normalize_rows(n)?);
    }
    let (cv, ct) = local_scores_node(&mut g, &s_nodes, &p_nodes);
    let (lv, lt) = local_loss_node(&mut g, cv, ct, tau_local);
    Ok((g.value(lv).item(), g.value(lt).item()))
}

/// Schedule weight: 0 before `delta` steps, `w_max` afterwards.
pub fn schedule_weight(step: u64, delta: u64, w_max: f64) -> f64 {
    if step < delta {
        0.0
    } else {
        w_max
    }
}

/// Ablation switches for the total objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossOptions {
    pub use_vv: bool,
    pub symmetric_vt: bool,
    pub vv_negatives: VvNegatives,
}

impl Default for LossOptions {
    fn default() -> Self {
        LossOptions {
            use_vv: true,
            symmetric_vt: true,
            vv_negatives: VvNegatives::PrimaryOnly,
        }
    }
}

/// The full objective at one step. Local features come from the primary
/// view only; both visual-text terms share the same caption embeddings.
/// Local terms are skipped (reported as zero) while the schedule weight is
/// zero.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    v: &Mat,
    v_pos: &Mat,
    t: &Mat,
    sentence_feats: &[Mat],
    patch_feats: &[Mat],
    temps: &Temperatures,
    step: u64,
    delta: u64,
    w_max: f64,
    opts: &LossOptions,
) -> Result<LossBreakdown> {
    temps.validate()?;
    let w = schedule_weight(step, delta, w_max);
    let l_vv = if opts.use_vv {
        info_nce_vv(v, v_pos, temps.tau1, opts.vv_negatives)?
    } else {
        0.0
    };
    let l_vt_primary = clip_vt(v, t, temps.tau2)?;
    let l_vt_positive = if opts.symmetric_vt {
        clip_vt(v_pos, t, temps.tau2)?
    } else {
        0.0
    };
    let (l_local_v, l_local_t) = if w != 0.0 {
        local_loss(sentence_feats, patch_feats, temps.tau_local)?
    } else {
        (0.0, 0.0)
    };
    let total = l_vv + l_vt_primary + l_vt_positive + w * (l_local_v + l_local_t) / 2.0;
    let breakdown = LossBreakdown {
        l_vv,
        l_vt_primary,
        l_vt_positive,
        l_local_v,
        l_local_t,
        w,
        total,
    };
    if !breakdown.is_finite() {
        return Err(MamaError::Numeric(format!(
            "non-finite loss breakdown: {breakdown:?}"
        )));
    }
    Ok(breakdown)
}
