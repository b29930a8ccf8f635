//! The desk-scale encoder pair: a patch-embedding vision transformer and a
//! token transformer (causal or bidirectional) with optional low-rank
//! adaptation of its attention projections.
//!
//! Parameters are named arrays in a [`ParamSet`]; forwards are built on a
//! [`Graph`] so the same code path serves training, evaluation and the
//! gradient checks. With LoRA enabled the base text encoder is frozen and
//! only the adapter factors (plus the projection heads) receive updates.

use std::collections::BTreeMap;
use std::rc::Rc;

use crate::encoder::{EmbeddingSet, EncoderConfig, TextEncoderKind, TokenRole};
use crate::error::{MamaError, Result};
use crate::graph::{Graph, Mask, NodeId};
use crate::image::GrayImage;
use crate::mat::Mat;
use crate::rng::Rng;
use crate::tokenizer::{TokenizedCaption, PAD_ID, SEP_ID};

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Mat,
    pub trainable: bool,
}

/// Named parameter arrays with deterministic iteration order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    params: BTreeMap<String, Param>,
}

impl ParamSet {
    pub fn insert(&mut self, name: &str, value: Mat, trainable: bool) {
        self.params
            .insert(name.to_string(), Param { value, trainable });
    }

    pub fn get(&self, name: &str) -> &Mat {
        &self
            .params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
            .value
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Mat {
        &mut self
            .params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
            .value
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|k| k.as_str())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Round every value to f32 precision. Keeping the live state exactly
    /// representable in the checkpoint format makes save/load/resume
    /// bit-exact against an uninterrupted run.
    pub fn quantize_f32(&mut self) {
        for p in self.params.values_mut() {
            for v in p.value.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}

/// Node ids of all parameters inserted as leaves of one graph.
pub struct ParamLeaves {
    ids: BTreeMap<String, NodeId>,
}

impl ParamLeaves {
    pub fn id(&self, name: &str) -> NodeId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("no leaf for parameter `{name}`"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.ids.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Vision forward outputs. `pooled` is the raw (unnormalized) global
/// vector; `tokens` is the final backbone token matrix feeding the global
/// head; `local` is the local head applied to position-free patch content.
pub struct VisionNodes {
    pub pooled: NodeId,
    pub local: NodeId,
    pub tokens: NodeId,
    pub roles: Vec<TokenRole>,
}

pub struct TextNodes {
    pub pooled: NodeId,
    pub local: NodeId,
    pub tokens: NodeId,
    pub roles: Vec<TokenRole>,
    pub sep_indices: Vec<usize>,
    pub sentence_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: EncoderConfig,
    pub params: ParamSet,
}

pub const TAU2_PARAM: &str = "loss.tau2";

impl Model {
    /// Random initialization. Each parameter draws from its own stream so
    /// the base weights do not depend on whether LoRA parameters exist.
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let root = Rng::new(seed);
        let mut params = ParamSet::default();

        fn hash(name: &str) -> u64 {
            let mut h: u64 = 0xcbf2_9ce4_8422_2325;
            for b in name.as_bytes() {
                h ^= *b as u64;
                h = h.wrapping_mul(0x100_0000_01b3);
            }
            h
        }
        fn add(
            params: &mut ParamSet,
            root: &Rng,
            name: &str,
            rows: usize,
            cols: usize,
            std: f64,
            trainable: bool,
        ) {
            let value = if std == 0.0 {
                Mat::zeros(rows, cols)
            } else {
                Mat::randn(rows, cols, std, &mut root.derive(hash(name)))
            };
            params.insert(name, value, trainable);
        }
        fn ones(params: &mut ParamSet, name: &str, cols: usize, trainable: bool) {
            params.insert(name, Mat::from_fn(1, cols, |_, _| 1.0), trainable);
        }
        fn add_block(
            params: &mut ParamSet,
            root: &Rng,
            tower: &str,
            i: usize,
            width: usize,
            mlp_ratio: usize,
            trainable: bool,
            lora_rank: usize,
        ) {
            let p = |s: &str| format!("{tower}.blk{i}.{s}");
            let std = 1.0 / (width as f64).sqrt();
            // residual-friendly init: small output projections keep each
            // token's own content dominant through the blocks
            let out_std = 0.3 * std;
            ones(params, &p("ln1.g"), width, trainable);
            add(params, root, &p("ln1.b"), 1, width, 0.0, trainable);
            for name in ["wq", "wk", "wv"] {
                add(params, root, &p(name), width, width, std, trainable);
            }
            add(params, root, &p("wo"), width, width, out_std, trainable);
            for name in ["bq", "bk", "bv", "bo"] {
                add(params, root, &p(name), 1, width, 0.0, trainable);
            }
            if lora_rank > 0 {
                for target in ["wq", "wv"] {
                    add(
                        params,
                        root,
                        &p(&format!("{target}.lora_a")),
                        width,
                        lora_rank,
                        std,
                        true,
                    );
                    add(
                        params,
                        root,
                        &p(&format!("{target}.lora_b")),
                        lora_rank,
                        width,
                        0.0,
                        true,
                    );
                }
            }
            ones(params, &p("ln2.g"), width, trainable);
            add(params, root, &p("ln2.b"), 1, width, 0.0, trainable);
            let h = width * mlp_ratio;
            add(params, root, &p("mlp.w1"), width, h, std, trainable);
            add(params, root, &p("mlp.b1"), 1, h, 0.0, trainable);
            add(
                params,
                root,
                &p("mlp.w2"),
                h,
                width,
                0.3 / (h as f64).sqrt(),
                trainable,
            );
            add(params, root, &p("mlp.b2"), 1, width, 0.0, trainable);
        }

        let (ph, pw) = config.patch_pixels();
        let pd = ph * pw;
        let (vw, tw, d) = (config.vision_width, config.text_width, config.embed_dim);
        let lora = config.lora_rank > 0;
        let p = &mut params;

        // vision tower: all trainable
        add(
            p,
            &root,
            "vis.patch.w",
            pd,
            vw,
            1.0 / (pd as f64).sqrt(),
            true,
        );
        add(p, &root, "vis.patch.b", 1, vw, 0.0, true);
        add(p, &root, "vis.cls", 1, vw, 0.02, true);
        add(
            p,
            &root,
            "vis.pos",
            config.patch_count() + 1,
            vw,
            0.02,
            true,
        );
        for i in 0..config.vision_blocks {
            add_block(p, &root, "vis", i, vw, config.mlp_ratio, true, 0);
        }
        ones(p, "vis.final.g", vw, true);
        add(p, &root, "vis.final.b", 1, vw, 0.0, true);
        add(
            p,
            &root,
            "vis.gproj.w",
            vw,
            d,
            1.0 / (vw as f64).sqrt(),
            true,
        );
        add(p, &root, "vis.gproj.b", 1, d, 0.0, true);
        add(
            p,
            &root,
            "vis.lproj.w",
            vw,
            d,
            1.0 / (vw as f64).sqrt(),
            true,
        );
        add(p, &root, "vis.lproj.b", 1, d, 0.0, true);

        // text tower: frozen base when adapters are active
        let base = !lora;
        add(
            p,
            &root,
            "txt.embed",
            config.vocab_size as usize,
            tw,
            1.0 / (tw as f64).sqrt(),
            base,
        );
        add(p, &root, "txt.pos", config.max_text_tokens, tw, 0.02, base);
        for i in 0..config.text_blocks {
            add_block(
                p,
                &root,
                "txt",
                i,
                tw,
                config.mlp_ratio,
                base,
                config.lora_rank,
            );
        }
        ones(p, "txt.final.g", tw, base);
        add(p, &root, "txt.final.b", 1, tw, 0.0, base);
        // projection heads are outside the frozen base
        add(
            p,
            &root,
            "txt.gproj.w",
            tw,
            d,
            1.0 / (tw as f64).sqrt(),
            true,
        );
        add(p, &root, "txt.gproj.b", 1, d, 0.0, true);
        add(
            p,
            &root,
            "txt.lproj.w",
            tw,
            d,
            1.0 / (tw as f64).sqrt(),
            true,
        );
        add(p, &root, "txt.lproj.b", 1, d, 0.0, true);

        params.insert(TAU2_PARAM, Mat::scalar(0.07), true);
        params.quantize_f32();
        Ok(Model { config, params })
    }

    /// Insert every parameter as a graph leaf.
    pub fn leaves(&self, g: &mut Graph) -> ParamLeaves {
        let mut ids = BTreeMap::new();
        for (name, p) in self.params.iter() {
            ids.insert(name.to_string(), g.input(p.value.clone()));
        }
        ParamLeaves { ids }
    }

    fn linear(g: &mut Graph, leaves: &ParamLeaves, x: NodeId, w: &str, b: &str) -> NodeId {
        let y = g.matmul(x, leaves.id(w));
        g.add_row_broadcast(y, leaves.id(b))
    }

    /// Attention projection with optional LoRA on top of the frozen base.
    fn attn_proj(
        &self,
        g: &mut Graph,
        leaves: &ParamLeaves,
        x: NodeId,
        prefix: &str,
        target: &str,
    ) -> NodeId {
        let w = format!("{prefix}.{target}");
        let mut y = g.matmul(x, leaves.id(&w));
        let lora_a = format!("{w}.lora_a");
        if self.params.contains(&lora_a) {
            let r = self.config.lora_rank;
            let down = g.matmul(x, leaves.id(&lora_a));
            let up = g.matmul(down, leaves.id(&format!("{w}.lora_b")));
            let scaled = g.scale(up, self.config.lora_alpha / r as f64);
            y = g.add(y, scaled);
        }
        let b = format!("{prefix}.b{}", &target[1..]);
        g.add_row_broadcast(y, leaves.id(&b))
    }

    fn block(
        &self,
        g: &mut Graph,
        leaves: &ParamLeaves,
        tok: NodeId,
        prefix: &str,
        width: usize,
        mask: Option<Mask>,
    ) -> NodeId {
        let p = |s: &str| format!("{prefix}.{s}");
        let h = g.layer_norm(tok, leaves.id(&p("ln1.g")), leaves.id(&p("ln1.b")));
        let q = self.attn_proj(g, leaves, h, prefix, "wq");
        let k = self.attn_proj(g, leaves, h, prefix, "wk");
        let v = self.attn_proj(g, leaves, h, prefix, "wv");
        let scores = g.matmul_nt(q, k);
        let scores = g.scale(scores, 1.0 / (width as f64).sqrt());
        let probs = g.softmax_rows(scores, mask);
        let attn = g.matmul(probs, v);
        let out = Self::linear(g, leaves, attn, &p("wo"), &p("bo"));
        let tok = g.add(tok, out);

        let h2 = g.layer_norm(tok, leaves.id(&p("ln2.g")), leaves.id(&p("ln2.b")));
        let m = Self::linear(g, leaves, h2, &p("mlp.w1"), &p("mlp.b1"));
        let m = g.gelu(m);
        let m = Self::linear(g, leaves, m, &p("mlp.w2"), &p("mlp.b2"));
        g.add(tok, m)
    }

    /// Flatten image into (P, patch_pixels) rows, row-major over the grid.
    pub fn patchify(&self, image: &GrayImage) -> Result<Mat> {
        let c = &self.config;
        if image.width != c.image_size || image.height != c.image_size {
            return Err(MamaError::Shape(format!(
                "image is {}x{}, config expects {}x{}",
                image.width, image.height, c.image_size, c.image_size
            )));
        }
        let (ph, pw) = c.patch_pixels();
        let mut out = Mat::zeros(c.patch_count(), ph * pw);
        for pr in 0..c.patch_rows {
            for pc in 0..c.patch_cols {
                let row = out.row_mut(pr * c.patch_cols + pc);
                for dy in 0..ph {
                    for dx in 0..pw {
                        // center pixels so the patch DC level does not
                        // dominate every patch feature direction
                        row[dy * pw + dx] = image.at(pr * ph + dy, pc * pw + dx) - 0.5;
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn vision_forward(
        &self,
        g: &mut Graph,
        leaves: &ParamLeaves,
        image: &GrayImage,
    ) -> Result<VisionNodes> {
        let patches = self.patchify(image)?;
        let x = g.input(patches);
        let tok = Self::linear(g, leaves, x, "vis.patch.w", "vis.patch.b");
        let tok = g.concat_rows(leaves.id("vis.cls"), tok);
        // the local path reads position-free patch content; position
        // affinities would otherwise dominate the correspondence argmax
        let tap = tok;
        let mut tok = g.add(tok, leaves.id("vis.pos"));
        for i in 0..self.config.vision_blocks {
            tok = self.block(
                g,
                leaves,
                tok,
                &format!("vis.blk{i}"),
                self.config.vision_width,
                None,
            );
        }
        let tok = g.layer_norm(tok, leaves.id("vis.final.g"), leaves.id("vis.final.b"));
        let gproj = Self::linear(g, leaves, tok, "vis.gproj.w", "vis.gproj.b");
        let patch_rows: Vec<usize> = (1..=self.config.patch_count()).collect();
        let pooled = g.rows_mean(gproj, &patch_rows);
        let local = Self::linear(g, leaves, tap, "vis.lproj.w", "vis.lproj.b");
        let mut roles = vec![TokenRole::Patch; self.config.patch_count() + 1];
        roles[0] = TokenRole::Cls;
        Ok(VisionNodes {
            pooled,
            local,
            tokens: tok,
            roles,
        })
    }

    pub fn text_forward(
        &self,
        g: &mut Graph,
        leaves: &ParamLeaves,
        tokens: &TokenizedCaption,
    ) -> Result<TextNodes> {
        let c = &self.config;
        let t = tokens.ids.len();
        if t == 0 {
            return Err(MamaError::Input("empty token sequence".into()));
        }
        if t > c.max_text_tokens {
            return Err(MamaError::Input(format!(
                "sequence length {t} exceeds max_text_tokens {}",
                c.max_text_tokens
            )));
        }
        for &id in &tokens.ids {
            if id >= c.vocab_size {
                return Err(MamaError::Input(format!(
                    "token id {id} outside vocab {}",
                    c.vocab_size
                )));
            }
        }
        let pad: Vec<bool> = tokens.roles.iter().map(|r| *r == TokenRole::Pad).collect();
        if pad.iter().all(|p| *p) {
            return Err(MamaError::Input("all tokens are padding".into()));
        }

        let ids: Vec<usize> = tokens.ids.iter().map(|&i| i as usize).collect();
        let emb = g.gather_rows(leaves.id("txt.embed"), &ids);
        let pos_rows: Vec<usize> = (0..t).collect();
        let pos = g.gather_rows(leaves.id("txt.pos"), &pos_rows);
        let mut tok = g.add(emb, pos);

        let causal = c.text_encoder_kind == TextEncoderKind::DecoderOnly;
        let mut mask = vec![true; t * t];
        for i in 0..t {
            for j in 0..t {
                let visible = (!causal || j <= i) && !pad[j];
                mask[i * t + j] = visible;
            }
        }
        let mask: Mask = Rc::new(mask);

        for i in 0..c.text_blocks {
            tok = self.block(
                g,
                leaves,
                tok,
                &format!("txt.blk{i}"),
                c.text_width,
                Some(mask.clone()),
            );
        }
        let tok = g.layer_norm(tok, leaves.id("txt.final.g"), leaves.id("txt.final.b"));
        let gproj = Self::linear(g, leaves, tok, "txt.gproj.w", "txt.gproj.b");
        let non_pad: Vec<usize> = (0..t).filter(|&i| !pad[i]).collect();
        let pooled = match c.text_encoder_kind {
            TextEncoderKind::DecoderOnly => {
                let last = *non_pad.last().expect("non-empty checked above");
                g.gather_rows(gproj, &[last])
            }
            TextEncoderKind::Bidirectional => g.rows_mean(gproj, &non_pad),
        };
        let local = Self::linear(g, leaves, tok, "txt.lproj.w", "txt.lproj.b");
        let sep_indices: Vec<usize> = tokens
            .roles
            .iter()
            .enumerate()
            .filter(|(_, r)| **r == TokenRole::Sep)
            .map(|(i, _)| i)
            .collect();
        Ok(TextNodes {
            pooled,
            local,
            tokens: tok,
            roles: tokens.roles.clone(),
            sep_indices,
            sentence_count: tokens.sentence_count,
        })
    }

    /// Value-level image encoding: raw global plus local token projections.
    pub fn encode_image(&self, image: &GrayImage) -> Result<EmbeddingSet> {
        let mut g = Graph::new();
        let leaves = self.leaves(&mut g);
        let out = self.vision_forward(&mut g, &leaves, image)?;
        let set = EmbeddingSet {
            global: g.value(out.pooled).row(0).to_vec(),
            local: g.value(out.local).clone(),
            token_roles: out.roles,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn encode_tokens(&self, tokens: &TokenizedCaption) -> Result<EmbeddingSet> {
        let mut g = Graph::new();
        let leaves = self.leaves(&mut g);
        let out = self.text_forward(&mut g, &leaves, tokens)?;
        let set = EmbeddingSet {
            global: g.value(out.pooled).row(0).to_vec(),
            local: g.value(out.local).clone(),
            token_roles: out.roles,
        };
        set.validate()?;
        Ok(set)
    }

    /// Encode raw token ids; roles are derived from the reserved ids.
    pub fn encode_text_ids(&self, ids: &[u32]) -> Result<EmbeddingSet> {
        let mut roles = Vec::with_capacity(ids.len());
        let mut sentence_of = Vec::with_capacity(ids.len());
        let mut sentence = 0usize;
        for &id in ids {
            let role = match id {
                PAD_ID => TokenRole::Pad,
                SEP_ID => TokenRole::Sep,
                crate::tokenizer::CLS_ID => TokenRole::Cls,
                _ => TokenRole::Word,
            };
            sentence_of.push(sentence);
            if role == TokenRole::Sep {
                sentence += 1;
            }
            roles.push(role);
        }
        let tokens = TokenizedCaption {
            ids: ids.to_vec(),
            roles,
            sentence_of,
            sentence_count: sentence,
        };
        self.encode_tokens(&tokens)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> EncoderConfig {
        EncoderConfig {
            embed_dim: 8,
            patch_rows: 2,
            patch_cols: 2,
            image_size: 8,
            max_text_tokens: 16,
            vision_width: 8,
            text_width: 8,
            vision_blocks: 1,
            text_blocks: 1,
            mlp_ratio: 2,
            vocab_size: 64,
            lora_rank: 2,
            lora_alpha: 4.0,
            text_encoder_kind: TextEncoderKind::DecoderOnly,
        }
    }

    fn constant_image(size: usize, v: f64) -> GrayImage {
        let mut img = GrayImage::new(size, size);
        img.pixels.iter_mut().for_each(|p| *p = v);
        img
    }

    fn identity_heads(model: &mut Model) {
        let w = model.config.vision_width;
        assert_eq!(w, model.config.embed_dim);
        for name in ["vis.gproj.w", "vis.lproj.w", "txt.gproj.w", "txt.lproj.w"] {
            *model.params.get_mut(name) = Mat::from_fn(w, w, |i, j| f64::from(i == j));
        }
        for name in ["vis.gproj.b", "vis.lproj.b", "txt.gproj.b", "txt.lproj.b"] {
            *model.params.get_mut(name) = Mat::zeros(1, w);
        }
    }

    #[test]
    fn zeroed_vision_params_give_zero_global() {
        let mut model = Model::init(tiny_config(), 0).unwrap();
        let names: Vec<String> = model
            .params
            .names()
            .filter(|n| n.starts_with("vis."))
            .map(String::from)
            .collect();
        for n in names {
            let m = model.params.get_mut(&n);
            *m = Mat::zeros(m.rows(), m.cols());
        }
        let set = model.encode_image(&constant_image(8, 0.5)).unwrap();
        assert!(set.global.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn constant_image_global_equals_patch_projection() {
        // identical patch features: pooling of constants is the constant.
        // Zero the positional table so constant pixels stay constant tokens.
        let mut model = Model::init(tiny_config(), 1).unwrap();
        identity_heads(&mut model);
        let pos = model.params.get_mut("vis.pos");
        *pos = Mat::zeros(pos.rows(), pos.cols());
        let mut g = Graph::new();
        let leaves = model.leaves(&mut g);
        let vn = model
            .vision_forward(&mut g, &leaves, &constant_image(8, 0.3))
            .unwrap();
        let tokens = g.value(vn.tokens).clone();
        let pooled = g.value(vn.pooled).clone();
        // all patch tokens are identical, so the pooled projection equals
        // the projection of any one of them (identity head)
        for p in 1..=model.config.patch_count() {
            for j in 0..model.config.embed_dim {
                assert!(
                    (pooled.at(0, j) - tokens.at(p, j)).abs() < 1e-12,
                    "patch {p} dim {j}"
                );
            }
        }
    }

    #[test]
    fn global_is_mean_of_projected_patch_tokens() {
        // independent matrix-multiply oracle on a 2x2 grid, d = 8
        let mut rng2 = Rng::new(77);
        let wg = Mat::randn(8, 8, 0.5, &mut rng2);
        let bg = Mat::randn(1, 8, 0.5, &mut rng2);
        let mut model = Model::init(tiny_config(), 2).unwrap();
        *model.params.get_mut("vis.gproj.w") = wg.clone();
        *model.params.get_mut("vis.gproj.b") = bg.clone();
        let mut rng = Rng::new(9);
        let mut img = GrayImage::new(8, 8);
        img.pixels.iter_mut().for_each(|p| *p = rng.next_f64());

        let mut g = Graph::new();
        let leaves = model.leaves(&mut g);
        let vn = model.vision_forward(&mut g, &leaves, &img).unwrap();
        let tokens = g.value(vn.tokens).clone();
        let pooled = g.value(vn.pooled).clone();

        // oracle: mean over patch rows of (backbone_token @ Wg + bg)
        let mut want = [0.0f64; 8];
        for p in 1..=4 {
            let token = tokens.row(p);
            for j in 0..8 {
                let mut acc = bg.at(0, j);
                for (k, &t) in token.iter().enumerate() {
                    acc += t * wg.at(k, j);
                }
                want[j] += acc / 4.0;
            }
        }
        for j in 0..8 {
            assert!(
                (pooled.at(0, j) - want[j]).abs() < 1e-9,
                "dim {j}: {} vs {}",
                pooled.at(0, j),
                want[j]
            );
        }
    }

    #[test]
    fn shape_contract() {
        let model = Model::init(tiny_config(), 3).unwrap();
        let set = model.encode_image(&constant_image(8, 0.1)).unwrap();
        assert_eq!(set.local.rows(), model.config.patch_count() + 1);
        let patches = crate::encoder::select_patch_features(&set.local, &set.token_roles).unwrap();
        assert_eq!(patches.rows(), model.config.patch_count());
        let wrong = constant_image(9, 0.1);
        assert!(matches!(
            model.encode_image(&wrong),
            Err(MamaError::Shape(_))
        ));
    }

    #[test]
    fn decoder_only_takes_last_non_pad_token() {
        let mut model = Model::init(tiny_config(), 4).unwrap();
        identity_heads(&mut model);
        let ids = vec![10, 11, 12, PAD_ID, PAD_ID];
        let set = model.encode_text_ids(&ids).unwrap();
        // global equals the backbone feature at index 2 (identity head)
        for j in 0..8 {
            assert!((set.global[j] - set.local.at(2, j)).abs() < 1e-12);
        }
    }

    #[test]
    fn bidirectional_identical_features_pool_to_that_feature() {
        let mut cfg = tiny_config();
        cfg.text_encoder_kind = TextEncoderKind::Bidirectional;
        let mut model = Model::init(cfg, 5).unwrap();
        identity_heads(&mut model);
        // zero positions so identical ids give identical token features
        let pos = model.params.get_mut("txt.pos");
        *pos = Mat::zeros(pos.rows(), pos.cols());
        let set = model.encode_text_ids(&[7, 7, 7, 7]).unwrap();
        for i in 1..4 {
            for j in 0..8 {
                assert!((set.local.at(i, j) - set.local.at(0, j)).abs() < 1e-12);
            }
        }
        for j in 0..8 {
            assert!((set.global[j] - set.local.at(0, j)).abs() < 1e-12);
        }
    }

    #[test]
    fn padding_extension_leaves_global_unchanged() {
        for kind in [TextEncoderKind::DecoderOnly, TextEncoderKind::Bidirectional] {
            let mut cfg = tiny_config();
            cfg.text_encoder_kind = kind;
            let model = Model::init(cfg, 6).unwrap();
            let short = model.encode_text_ids(&[5, 9, 2]).unwrap();
            let padded = model
                .encode_text_ids(&[5, 9, 2, PAD_ID, PAD_ID, PAD_ID])
                .unwrap();
            for j in 0..model.config.embed_dim {
                assert_eq!(short.global[j], padded.global[j], "kind {kind:?} dim {j}");
            }
        }
    }

    #[test]
    fn text_input_errors() {
        let model = Model::init(tiny_config(), 7).unwrap();
        assert!(matches!(
            model.encode_text_ids(&[]),
            Err(MamaError::Input(_))
        ));
        let too_long = vec![5u32; 17];
        assert!(matches!(
            model.encode_text_ids(&too_long),
            Err(MamaError::Input(_))
        ));
        assert!(matches!(
            model.encode_text_ids(&[PAD_ID, PAD_ID]),
            Err(MamaError::Input(_))
        ));
    }

    #[test]
    fn lora_init_matches_frozen_base_exactly() {
        let with_lora = Model::init(tiny_config(), 8).unwrap();
        let mut cfg = tiny_config();
        cfg.lora_rank = 0;
        let without = Model::init(cfg, 8).unwrap();
        let ids = vec![4, 17, 2, 33, 2];
        let a = with_lora.encode_text_ids(&ids).unwrap();
        let b = without.encode_text_ids(&ids).unwrap();
        assert_eq!(a.global, b.global);
        assert_eq!(a.local, b.local);
    }

    #[test]
    fn lora_freezes_base_text_parameters() {
        let model = Model::init(tiny_config(), 9).unwrap();
        for (name, p) in model.params.iter() {
            let is_lora = name.contains(".lora_");
            let is_head = name.starts_with("txt.gproj") || name.starts_with("txt.lproj");
            if name.starts_with("txt.") && !is_lora && !is_head {
                assert!(!p.trainable, "{name} should be frozen");
            } else {
                assert!(p.trainable, "{name} should be trainable");
            }
        }
    }

    #[test]
    fn quantize_keeps_f32_representable_state() {
        let model = Model::init(tiny_config(), 10).unwrap();
        for (name, p) in model.params.iter() {
            for &v in p.value.data() {
                assert_eq!(v, v as f32 as f64, "{name} not f32-representable");
            }
        }
    }
}
