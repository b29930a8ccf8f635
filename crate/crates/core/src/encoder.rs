//! Encoder/projection contracts: configuration, embedding containers, token
//! selection and the low-rank adaptation math.

use crate::error::{MamaError, Result};
use crate::mat::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TextEncoderKind {
    Bidirectional,
    DecoderOnly,
}

impl TextEncoderKind {
    pub fn parse(s: &str) -> Option<TextEncoderKind> {
        match s.trim().to_ascii_lowercase().as_str() {
            "bidirectional" => Some(TextEncoderKind::Bidirectional),
            "decoder_only" | "decoder-only" => Some(TextEncoderKind::DecoderOnly),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            TextEncoderKind::Bidirectional => "bidirectional",
            TextEncoderKind::DecoderOnly => "decoder_only",
        }
    }
}

/// Architecture hyperparameters shared by both encoders.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    /// Shared embedding dimension d.
    pub embed_dim: usize,
    pub patch_rows: usize,
    pub patch_cols: usize,
    /// Square input side in pixels.
    pub image_size: usize,
    pub max_text_tokens: usize,
    pub vision_width: usize,
    pub text_width: usize,
    pub vision_blocks: usize,
    pub text_blocks: usize,
    pub mlp_ratio: usize,
    pub vocab_size: u32,
    /// LoRA rank r; 0 disables adaptation and trains the text encoder fully.
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub text_encoder_kind: TextEncoderKind,
}

impl EncoderConfig {
    /// Small CPU-friendly profile used throughout the tests.
    pub fn desk() -> Self {
        EncoderConfig {
            embed_dim: 64,
            patch_rows: 4,
            patch_cols: 4,
            image_size: 32,
            max_text_tokens: 80,
            vision_width: 64,
            text_width: 64,
            vision_blocks: 2,
            text_blocks: 2,
            mlp_ratio: 2,
            vocab_size: 512,
            lora_rank: 4,
            lora_alpha: 8.0,
            text_encoder_kind: TextEncoderKind::DecoderOnly,
        }
    }

    /// Nominal production profile (518x518 inputs, ViT-B-like widths). Kept
    /// as a named preset for configuration echo; not exercised on CPU.
    pub fn full_scale() -> Self {
        EncoderConfig {
            embed_dim: 512,
            patch_rows: 37,
            patch_cols: 37,
            image_size: 518,
            max_text_tokens: 256,
            vision_width: 768,
            text_width: 2560,
            vision_blocks: 12,
            text_blocks: 32,
            mlp_ratio: 4,
            vocab_size: 50_000,
            lora_rank: 16,
            lora_alpha: 32.0,
            text_encoder_kind: TextEncoderKind::DecoderOnly,
        }
    }

    pub fn patch_count(&self) -> usize {
        self.patch_rows * self.patch_cols
    }

    pub fn patch_pixels(&self) -> (usize, usize) {
        (
            self.image_size / self.patch_rows,
            self.image_size / self.patch_cols,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.vision_width == 0 || self.text_width == 0 {
            return Err(MamaError::Config("widths must be positive".into()));
        }
        if self.patch_count() == 0 {
            return Err(MamaError::Config("patch grid must be non-empty".into()));
        }
        if self.image_size % self.patch_rows != 0 || self.image_size % self.patch_cols != 0 {
            return Err(MamaError::Config(format!(
                "image size {} not divisible by patch grid {}x{}",
                self.image_size, self.patch_rows, self.patch_cols
            )));
        }
        if self.max_text_tokens == 0 {
            return Err(MamaError::Config("max_text_tokens must be positive".into()));
        }
        if self.lora_rank > self.text_width {
            return Err(MamaError::Config(format!(
                "lora rank {} exceeds adapted matrix dimension {}",
                self.lora_rank, self.text_width
            )));
        }
        Ok(())
    }
}

/// Per-token tag in an embedding sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenRole {
    Cls,
    Patch,
    Sep,
    Word,
    Pad,
}

/// Global vector plus local token sequence from an encoder/projection stack.
/// The global vector is the raw pooled projection; callers normalize.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub global: Vec<f64>,
    /// tokens x d
    pub local: Mat,
    pub token_roles: Vec<TokenRole>,
}

impl EmbeddingSet {
    pub fn validate(&self) -> Result<()> {
        if !self.global.iter().all(|v| v.is_finite()) || !self.local.is_finite() {
            return Err(MamaError::Numeric("non-finite embedding".into()));
        }
        if self.local.rows() != self.token_roles.len() {
            return Err(MamaError::Shape(format!(
                "local rows {} vs roles {}",
                self.local.rows(),
                self.token_roles.len()
            )));
        }
        Ok(())
    }
}

/// v / ||v||. A zero vector signals a degenerate embedding.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm <= 0.0 || !norm.is_finite() {
        return Err(MamaError::Numeric(format!(
            "cannot normalize vector with norm {norm}"
        )));
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

/// Rows of `local` tagged SEP, in order. Exactly `sentence_count` must exist.
pub fn select_sentence_features(
    local: &Mat,
    token_roles: &[TokenRole],
    sentence_count: usize,
) -> Result<Mat> {
    let idx: Vec<usize> = token_roles
        .iter()
        .enumerate()
        .filter(|(_, r)| **r == TokenRole::Sep)
        .map(|(i, _)| i)
        .collect();
    if idx.len() != sentence_count {
        return Err(MamaError::Alignment(format!(
            "expected {sentence_count} SEP tokens, found {}",
            idx.len()
        )));
    }
    Ok(local.gather_rows(&idx))
}

/// All PATCH rows in spatial order, after checking the single CLS tag.
pub fn select_patch_features(local: &Mat, token_roles: &[TokenRole]) -> Result<Mat> {
    let cls = token_roles.iter().filter(|r| **r == TokenRole::Cls).count();
    if cls != 1 {
        return Err(MamaError::Alignment(format!(
            "expected exactly one CLS token, found {cls}"
        )));
    }
    let idx: Vec<usize> = token_roles
        .iter()
        .enumerate()
        .filter(|(_, r)| **r == TokenRole::Patch)
        .map(|(i, _)| i)
        .collect();
    Ok(local.gather_rows(&idx))
}

/// (W + (alpha/r) B A) x, the adapted linear map. W is (d_out, k), A is
/// (r, k), B is (d_out, r), x has length k. r = 0 returns W x unchanged.
pub fn lora_forward(
    x: &[f64],
    w: &Mat,
    a: &Mat,
    b: &Mat,
    alpha: f64,
    r: usize,
) -> Result<Vec<f64>> {
    if w.cols() != x.len() {
        return Err(MamaError::Shape(format!(
            "W is {}x{} but x has length {}",
            w.rows(),
            w.cols(),
            x.len()
        )));
    }
    let base: Vec<f64> = (0..w.rows())
        .map(|i| crate::mat::dot(w.row(i), x))
        .collect();
    if r == 0 {
        return Ok(base);
    }
    if a.shape() != (r, w.cols()) || b.shape() != (w.rows(), r) {
        return Err(MamaError::Shape(format!(
            "LoRA shapes A{:?} B{:?} incompatible with W{:?} at rank {r}",
            a.shape(),
            b.shape(),
            w.shape()
        )));
    }
    let scale = alpha / r as f64;
    let ax: Vec<f64> = (0..r).map(|i| crate::mat::dot(a.row(i), x)).collect();
    let out = base
        .iter()
        .enumerate()
        .map(|(i, &base_i)| base_i + scale * crate::mat::dot(b.row(i), &ax))
        .collect();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn l2_normalize_three_four() {
        let v = l2_normalize(&[3.0, 4.0]).unwrap();
        assert!((v[0] - 0.6).abs() < 1e-12 && (v[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn l2_normalize_unit_unchanged_and_random_norm() {
        let u = l2_normalize(&[1.0, 0.0, 0.0]).unwrap();
        assert_eq!(u, vec![1.0, 0.0, 0.0]);
        let mut rng = Rng::new(4);
        let v: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
        let n = l2_normalize(&v).unwrap();
        let norm = n.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-7);
    }

    #[test]
    fn l2_normalize_rejects_zero() {
        assert!(matches!(
            l2_normalize(&[0.0, 0.0]),
            Err(MamaError::Numeric(_))
        ));
    }

    #[test]
    fn sentence_selection_by_position() {
        let mut rng = Rng::new(1);
        let local = Mat::randn(14, 4, 1.0, &mut rng);
        let mut roles = vec![TokenRole::Word; 14];
        roles[4] = TokenRole::Sep;
        roles[9] = TokenRole::Sep;
        roles[13] = TokenRole::Sep;
        let s = select_sentence_features(&local, &roles, 3).unwrap();
        assert_eq!(s.row(0), local.row(4));
        assert_eq!(s.row(1), local.row(9));
        assert_eq!(s.row(2), local.row(13));
        assert!(select_sentence_features(&local, &roles, 2).is_err());
    }

    #[test]
    fn sentence_selection_ignores_other_rows() {
        let mut rng = Rng::new(2);
        let mut local = Mat::randn(6, 3, 1.0, &mut rng);
        let roles = vec![
            TokenRole::Word,
            TokenRole::Sep,
            TokenRole::Word,
            TokenRole::Word,
            TokenRole::Sep,
            TokenRole::Pad,
        ];
        let before = select_sentence_features(&local, &roles, 2).unwrap();
        // permute non-SEP rows
        let r0 = local.row(0).to_vec();
        let r2 = local.row(2).to_vec();
        local.row_mut(0).copy_from_slice(&r2);
        local.row_mut(2).copy_from_slice(&r0);
        let after = select_sentence_features(&local, &roles, 2).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn patch_selection_requires_cls() {
        let mut rng = Rng::new(3);
        let local = Mat::randn(5, 3, 1.0, &mut rng);
        let roles = vec![
            TokenRole::Cls,
            TokenRole::Patch,
            TokenRole::Patch,
            TokenRole::Patch,
            TokenRole::Patch,
        ];
        let p = select_patch_features(&local, &roles).unwrap();
        assert_eq!(p.rows(), 4);
        assert_eq!(p.row(0), local.row(1));
        assert_eq!(p.row(3), local.row(4));
        let no_cls = vec![TokenRole::Patch; 5];
        assert!(select_patch_features(&local, &no_cls).is_err());
    }

    #[test]
    fn lora_zero_b_is_base_map() {
        let mut rng = Rng::new(5);
        let w = Mat::randn(3, 4, 1.0, &mut rng);
        let a = Mat::randn(2, 4, 1.0, &mut rng);
        let b = Mat::zeros(3, 2);
        let x = [0.5, -1.0, 2.0, 0.25];
        let adapted = lora_forward(&x, &w, &a, &b, 4.0, 2).unwrap();
        let base = lora_forward(&x, &w, &a, &b, 4.0, 0).unwrap();
        assert_eq!(adapted, base);
    }

    #[test]
    fn lora_rank_zero_is_identity_to_base() {
        let mut rng = Rng::new(6);
        let w = Mat::randn(3, 3, 1.0, &mut rng);
        let x = [1.0, 2.0, 3.0];
        let out = lora_forward(&x, &w, &Mat::zeros(1, 1), &Mat::zeros(1, 1), 0.0, 0).unwrap();
        for i in 0..3 {
            assert!((out[i] - crate::mat::dot(w.row(i), &x)).abs() < 1e-15);
        }
    }

    #[test]
    fn lora_matches_dense_oracle() {
        // r=2, alpha=4 on a 3x3 W: (W + 2 B A) x
        let mut rng = Rng::new(7);
        let w = Mat::randn(3, 3, 1.0, &mut rng);
        let a = Mat::randn(2, 3, 1.0, &mut rng);
        let b = Mat::randn(3, 2, 1.0, &mut rng);
        let x = [0.3, -0.7, 1.1];
        let got = lora_forward(&x, &w, &a, &b, 4.0, 2).unwrap();
        let dense = w.add(&b.matmul(&a).scale(2.0));
        for i in 0..3 {
            let want = crate::mat::dot(dense.row(i), &x);
            assert!((got[i] - want).abs() < 1e-6, "{} vs {want}", got[i]);
        }
    }

    #[test]
    fn lora_shape_mismatch_errors() {
        let w = Mat::zeros(3, 3);
        let a = Mat::zeros(2, 4);
        let b = Mat::zeros(3, 2);
        assert!(matches!(
            lora_forward(&[1.0, 2.0, 3.0], &w, &a, &b, 4.0, 2),
            Err(MamaError::Shape(_))
        ));
    }

    #[test]
    fn config_validation() {
        assert!(EncoderConfig::desk().validate().is_ok());
        let mut bad = EncoderConfig::desk();
        bad.image_size = 33;
        assert!(bad.validate().is_err());
        let mut bad = EncoderConfig::desk();
        bad.lora_rank = 1000;
        assert!(bad.validate().is_err());
    }
}
