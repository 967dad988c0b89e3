//! Single-stream transformer over `[CLS] text [SEP] visual-tokens`.
//!
//! Text tokens embed as word + segment(0) + position; visual tokens embed as
//! projected RoI feature + segment(1) + projected 5-d box geometry + one shared
//! dummy position, each followed by layer norm. The encoder is post-LN with
//! GELU feed-forward blocks. Four heads sit on top: masked-token vocabulary
//! logits, object-class logits, RoI-feature regression and an image-text
//! matching logit read from `[CLS]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::{Graph, Mode, Tensor, Var};
use crate::tokenizer::TokenSequence;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub intermediate: usize,
    pub heads: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    pub max_seq_len: usize,
    /// Longest token sequence including `[CLS]` and `[SEP]`.
    pub max_text_len: usize,
    pub num_visual_tokens: usize,
    pub visual_dim: usize,
    pub vocab_size: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub use_global_feature: bool,
    #[serde(default = "default_ln_eps")]
    pub layer_norm_eps: f64,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

fn default_dropout() -> f64 {
    0.1
}
fn default_ln_eps() -> f64 {
    1e-12
}
fn default_init_std() -> f64 {
    0.02
}

impl ModelConfig {
    /// Gradient-check size: 2 layers, d=16, 2 heads, 4 RoIs, 6 text tokens.
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            layers: 2,
            hidden: 16,
            intermediate: 32,
            heads: 2,
            dropout: 0.1,
            max_seq_len: 12,
            max_text_len: 6,
            num_visual_tokens: 4,
            visual_dim: 8,
            vocab_size,
            num_classes: 5,
            use_global_feature: false,
            layer_norm_eps: 1e-12,
            init_std: 0.02,
        }
    }

    /// 12 layers, 768 hidden, 3072 intermediate, 12 heads, sequence of 144
    /// holding 100 RoIs of 2048-d features over 1600 detector classes.
    pub fn base_scale() -> Self {
        Self {
            layers: 12,
            hidden: 768,
            intermediate: 3072,
            heads: 12,
            dropout: 0.1,
            max_seq_len: 144,
            max_text_len: 44,
            num_visual_tokens: 100,
            visual_dim: 2048,
            vocab_size: 30522,
            num_classes: 1600,
            use_global_feature: false,
            layer_norm_eps: 1e-12,
            init_std: 0.02,
        }
    }

    pub fn visual_slots(&self) -> usize {
        self.num_visual_tokens + usize::from(self.use_global_feature)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.layers == 0 || self.hidden == 0 || self.intermediate == 0 || self.heads == 0 {
            return bad("layers, hidden, intermediate and heads must be positive".into());
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return bad(format!(
                "hidden {} is not divisible by {} heads",
                self.hidden, self.heads
            ));
        }
        if self.hidden < 2 {
            return bad("hidden must be at least 2".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.max_text_len < 3 {
            return bad("max_text_len must leave room for [CLS], a token and [SEP]".into());
        }
        if self.num_visual_tokens == 0 {
            return bad("at least one visual token is required".into());
        }
        if self.max_text_len + self.visual_slots() > self.max_seq_len {
            return bad(format!(
                "max_text_len {} + {} visual slots exceeds max_seq_len {}",
                self.max_text_len,
                self.visual_slots(),
                self.max_seq_len
            ));
        }
        if self.visual_dim == 0 || self.vocab_size < 6 || self.num_classes < 2 {
            return bad("visual_dim, vocab_size and num_classes are too small".into());
        }
        Ok(())
    }

    /// Row of the position table shared by every visual token.
    pub fn dummy_visual_position(&self) -> usize {
        self.max_text_len
    }
}

/// Detector output for one image: RoI features, labels and boxes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisualTokenSet {
    /// `o × visual_dim`, row-major.
    pub features: Vec<f64>,
    pub visual_dim: usize,
    pub class_labels: Vec<usize>,
    /// `(x_tl, y_tl, x_br, y_br)` in pixels.
    pub boxes: Vec<[f64; 4]>,
    pub image_size: (f64, f64),
    #[serde(default)]
    pub global_feature: Option<Vec<f64>>,
}

impl VisualTokenSet {
    pub fn num_tokens(&self) -> usize {
        self.class_labels.len()
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i * self.visual_dim..(i + 1) * self.visual_dim]
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let o = self.class_labels.len();
        if o == 0 {
            return Err(Error::Input("an image needs at least one RoI".into()));
        }
        if self.boxes.len() != o || self.features.len() != o * self.visual_dim {
            return Err(Error::Dim(format!(
                "{o} labels, {} boxes, {} feature values for dim {}",
                self.boxes.len(),
                self.features.len(),
                self.visual_dim
            )));
        }
        if let Some(&l) = self.class_labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Index(format!("class label {l} outside [0, {num_classes})")));
        }
        let (w, h) = self.image_size;
        for b in &self.boxes {
            let ok = 0.0 <= b[0] && b[0] < b[2] && b[2] <= w && 0.0 <= b[1] && b[1] < b[3] && b[3] <= h;
            if !ok {
                return Err(Error::Input(format!("box {b:?} invalid for image {w}x{h}")));
            }
        }
        if let Some(gf) = &self.global_feature {
            if gf.len() != self.visual_dim {
                return Err(Error::Dim("global feature has the wrong dimension".into()));
            }
        }
        Ok(())
    }

    /// Copy keeping only the first `o` RoIs.
    pub fn truncated(&self, o: usize) -> VisualTokenSet {
        let o = o.min(self.num_tokens());
        VisualTokenSet {
            features: self.features[..o * self.visual_dim].to_vec(),
            visual_dim: self.visual_dim,
            class_labels: self.class_labels[..o].to_vec(),
            boxes: self.boxes[..o].to_vec(),
            image_size: self.image_size,
            global_feature: self.global_feature.clone(),
        }
    }
}

/// `(x_tl/W, y_tl/H, x_br/W, y_br/H, area/(W·H))`.
pub fn geometry_vector(b: [f64; 4], width: f64, height: f64) -> Result<[f64; 5]> {
    if width <= 0.0 || height <= 0.0 {
        return Err(Error::Config(format!("image size {width}x{height} must be positive")));
    }
    let area = (b[2] - b[0]) * (b[3] - b[1]) / (width * height);
    Ok([b[0] / width, b[1] / height, b[2] / width, b[3] / height, area])
}

#[derive(Clone, Debug)]
struct LayerIds {
    qkv_w: usize,
    qkv_b: usize,
    out_w: usize,
    out_b: usize,
    ln1_g: usize,
    ln1_b: usize,
    ff1_w: usize,
    ff1_b: usize,
    ff2_w: usize,
    ff2_b: usize,
    ln2_g: usize,
    ln2_b: usize,
}

#[derive(Clone, Debug)]
struct ParamIds {
    word: usize,
    segment: usize,
    position: usize,
    text_ln_g: usize,
    text_ln_b: usize,
    img_w: usize,
    img_b: usize,
    geo_w: usize,
    geo_b: usize,
    vis_ln_g: usize,
    vis_ln_b: usize,
    layers: Vec<LayerIds>,
    mlm_w: usize,
    mlm_b: usize,
    moc_w: usize,
    moc_b: usize,
    mrfr_w: usize,
    mrfr_b: usize,
    itm_w: usize,
    itm_b: usize,
}

/// Names of the head parameters, per task.
pub const MLM_HEAD: [&str; 2] = ["head.mlm.weight", "head.mlm.bias"];
pub const MOC_HEAD: [&str; 2] = ["head.moc.weight", "head.moc.bias"];
pub const MRFR_HEAD: [&str; 2] = ["head.mrfr.weight", "head.mrfr.bias"];
pub const ITM_HEAD: [&str; 2] = ["head.itm.weight", "head.itm.bias"];

#[derive(Clone, Debug)]
pub struct Model {
    cfg: ModelConfig,
    params: ParamStore,
    ids: ParamIds,
}

/// Output of [`Model::forward`]: encoder states plus where each part sits.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub hidden: Var,
    pub text_len: usize,
    pub num_visual: usize,
}

impl Encoded {
    pub fn visual_row(&self, i: usize) -> usize {
        self.text_len + i
    }
}

impl Model {
    pub fn new(cfg: ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let mut p = ParamStore::new();
        let std = cfg.init_std;
        let d = cfg.hidden;
        let normal = |shape: Vec<usize>, rng: &mut Rng| {
            let n: usize = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| rng.truncated_normal(std)).collect()).expect("sized")
        };
        let zeros = |n: usize| Tensor::zeros(vec![n]);
        let ones = |n: usize| Tensor::filled(vec![n], 1.0);

        let word = p.add("embed.word", normal(vec![cfg.vocab_size, d], rng))?;
        let segment = p.add("embed.segment", normal(vec![2, d], rng))?;
        let position = p.add("embed.position", normal(vec![cfg.max_text_len + 1, d], rng))?;
        let text_ln_g = p.add("embed.text_ln.gain", ones(d))?;
        let text_ln_b = p.add("embed.text_ln.bias", zeros(d))?;
        let img_w = p.add("embed.image.weight", normal(vec![cfg.visual_dim, d], rng))?;
        let img_b = p.add("embed.image.bias", zeros(d))?;
        let geo_w = p.add("embed.geometry.weight", normal(vec![5, d], rng))?;
        let geo_b = p.add("embed.geometry.bias", zeros(d))?;
        let vis_ln_g = p.add("embed.visual_ln.gain", ones(d))?;
        let vis_ln_b = p.add("embed.visual_ln.bias", zeros(d))?;
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let n = |s: &str| format!("encoder.{l}.{s}");
            layers.push(LayerIds {
                qkv_w: p.add(n("attn.qkv.weight"), normal(vec![d, 3 * d], rng))?,
                qkv_b: p.add(n("attn.qkv.bias"), zeros(3 * d))?,
                out_w: p.add(n("attn.out.weight"), normal(vec![d, d], rng))?,
                out_b: p.add(n("attn.out.bias"), zeros(d))?,
                ln1_g: p.add(n("attn_ln.gain"), ones(d))?,
                ln1_b: p.add(n("attn_ln.bias"), zeros(d))?,
                ff1_w: p.add(n("ffn.in.weight"), normal(vec![d, cfg.intermediate], rng))?,
                ff1_b: p.add(n("ffn.in.bias"), zeros(cfg.intermediate))?,
                ff2_w: p.add(n("ffn.out.weight"), normal(vec![cfg.intermediate, d], rng))?,
                ff2_b: p.add(n("ffn.out.bias"), zeros(d))?,
                ln2_g: p.add(n("ffn_ln.gain"), ones(d))?,
                ln2_b: p.add(n("ffn_ln.bias"), zeros(d))?,
            });
        }
        let mlm_w = p.add(MLM_HEAD[0], normal(vec![d, cfg.vocab_size], rng))?;
        let mlm_b = p.add(MLM_HEAD[1], zeros(cfg.vocab_size))?;
        let moc_w = p.add(MOC_HEAD[0], normal(vec![d, cfg.num_classes], rng))?;
        let moc_b = p.add(MOC_HEAD[1], zeros(cfg.num_classes))?;
        let mrfr_w = p.add(MRFR_HEAD[0], normal(vec![d, cfg.visual_dim], rng))?;
        let mrfr_b = p.add(MRFR_HEAD[1], zeros(cfg.visual_dim))?;
        let itm_w = p.add(ITM_HEAD[0], normal(vec![d, 1], rng))?;
        let itm_b = p.add(ITM_HEAD[1], zeros(1))?;
        let ids = ParamIds {
            word,
            segment,
            position,
            text_ln_g,
            text_ln_b,
            img_w,
            img_b,
            geo_w,
            geo_b,
            vis_ln_g,
            vis_ln_b,
            layers,
            mlm_w,
            mlm_b,
            moc_w,
            moc_b,
            mrfr_w,
            mrfr_b,
            itm_w,
            itm_b,
        };
        Ok(Self { cfg, params: p, ids })
    }

    /// Rebuilds a model around parameters loaded from a checkpoint.
    pub fn from_params(cfg: ModelConfig, params: ParamStore) -> Result<Self> {
        let mut model = Self::new(cfg, &mut Rng::new(0))?;
        crate::checkpoint::restore_into(&mut model.params, &params)?;
        Ok(model)
    }

    /// Copies every tensor of `src` whose name and shape match a model tensor
    /// (for seeding from externally trained weights). Returns the names copied.
    pub fn import_matching(&mut self, src: &ParamStore) -> Vec<String> {
        let mut copied = Vec::new();
        for (name, t) in src.iter() {
            if let Some(dst) = self.params.by_name_mut(name) {
                if dst.shape() == t.shape() {
                    dst.data_mut().copy_from_slice(t.data());
                    copied.push(name.to_string());
                }
            }
        }
        copied
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// Parameter ids of the named head tensors.
    pub fn head_ids(&self, names: &[&str]) -> Vec<usize> {
        names.iter().filter_map(|n| self.params.id(n)).collect()
    }

    pub fn bind<'a>(&'a self, g: &mut Graph<'a>) -> Vec<Var> {
        self.params.bind(g)
    }

    /// `LN(word + segment + position)` for every token of `seq`.
    pub fn embed_text(&self, g: &mut Graph<'_>, p: &[Var], seq: &TokenSequence) -> Result<Var> {
        let n = seq.len();
        if n > self.cfg.max_text_len {
            return Err(Error::Config(format!(
                "text of {n} tokens exceeds max_text_len {}",
                self.cfg.max_text_len
            )));
        }
        if let Some(&pos) = seq.positions.iter().find(|&&q| q >= self.cfg.max_text_len) {
            return Err(Error::Config(format!(
                "position {pos} outside text positions 0..{}",
                self.cfg.max_text_len
            )));
        }
        let ids = &self.ids;
        let w = g.embedding(p[ids.word], &seq.token_ids)?;
        let s = g.embedding(p[ids.segment], &seq.segment_ids)?;
        let q = g.embedding(p[ids.position], &seq.positions)?;
        let ws = g.add(w, s)?;
        let sum = g.add(ws, q)?;
        g.layer_norm(sum, p[ids.text_ln_g], p[ids.text_ln_b], self.cfg.layer_norm_eps)
    }

    /// `LN(ImageEmbed(r) + segment(1) + GeomEmbed(c) + position(dummy))` per
    /// RoI, with the global feature (if enabled) appended as a whole-image token.
    pub fn embed_visual(&self, g: &mut Graph<'_>, p: &[Var], v: &VisualTokenSet) -> Result<Var> {
        let o = v.num_tokens();
        if o > self.cfg.num_visual_tokens {
            return Err(Error::Input(format!(
                "{o} RoIs exceed the configured {} visual tokens",
                self.cfg.num_visual_tokens
            )));
        }
        if o == 0 {
            return Err(Error::Input("an image needs at least one RoI".into()));
        }
        if v.visual_dim != self.cfg.visual_dim {
            return Err(Error::Dim(format!(
                "feature dim {} but the model expects {}",
                v.visual_dim, self.cfg.visual_dim
            )));
        }
        let (wd, ht) = v.image_size;
        let mut feats = v.features.clone();
        let mut geo = Vec::with_capacity((o + 1) * 5);
        for b in &v.boxes {
            geo.extend_from_slice(&geometry_vector(*b, wd, ht)?);
        }
        let mut rows = o;
        if self.cfg.use_global_feature {
            let gf = v
                .global_feature
                .as_ref()
                .ok_or_else(|| Error::Input("global feature enabled but missing".into()))?;
            if gf.len() != self.cfg.visual_dim {
                return Err(Error::Dim("global feature has the wrong dimension".into()));
            }
            feats.extend_from_slice(gf);
            geo.extend_from_slice(&[0.0, 0.0, 1.0, 1.0, 1.0]);
            rows += 1;
        }
        let ids = &self.ids;
        let f = g.input(vec![rows, self.cfg.visual_dim], feats)?;
        let c = g.input(vec![rows, 5], geo)?;
        let fw = g.matmul(f, p[ids.img_w])?;
        let obj = g.add_row(fw, p[ids.img_b])?;
        let cw = g.matmul(c, p[ids.geo_w])?;
        let loc = g.add_row(cw, p[ids.geo_b])?;
        let seg = g.embedding(p[ids.segment], &vec![1; rows])?;
        let pos = g.embedding(p[ids.position], &vec![self.cfg.dummy_visual_position(); rows])?;
        let a = g.add(obj, loc)?;
        let b = g.add(a, seg)?;
        let sum = g.add(b, pos)?;
        g.layer_norm(sum, p[ids.vis_ln_g], p[ids.vis_ln_b], self.cfg.layer_norm_eps)
    }

    /// Runs the encoder stack over the concatenation of `text_emb` and
    /// `visual_emb`. `attention_mask` covers the joint sequence; masked keys
    /// get zero attention weight.
    pub fn encode(
        &self,
        g: &mut Graph<'_>,
        p: &[Var],
        text_emb: Var,
        visual_emb: Var,
        attention_mask: &[bool],
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<Var> {
        let mut x = g.concat_rows(&[text_emb, visual_emb])?;
        let len = g.shape(x)[0];
        if attention_mask.len() != len {
            return Err(Error::Dim(format!(
                "attention mask of length {} for a sequence of {len}",
                attention_mask.len()
            )));
        }
        if len > self.cfg.max_seq_len {
            return Err(Error::Config(format!(
                "sequence of {len} exceeds max_seq_len {}",
                self.cfg.max_seq_len
            )));
        }
        let mask = if attention_mask.iter().all(|&b| b) {
            None
        } else {
            Some(attention_mask)
        };
        let d = self.cfg.hidden;
        let dh = d / self.cfg.heads;
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let pdrop = self.cfg.dropout;
        let eps = self.cfg.layer_norm_eps;
        for l in &self.ids.layers {
            let qkv0 = g.matmul(x, p[l.qkv_w])?;
            let qkv = g.add_row(qkv0, p[l.qkv_b])?;
            let mut ctx = Vec::with_capacity(self.cfg.heads);
            for h in 0..self.cfg.heads {
                let q = g.slice_cols(qkv, h * dh, dh)?;
                let k = g.slice_cols(qkv, d + h * dh, dh)?;
                let v = g.slice_cols(qkv, 2 * d + h * dh, dh)?;
                let kt = g.transpose(k)?;
                let s0 = g.matmul(q, kt)?;
                let s = g.scale(s0, inv_sqrt);
                let a0 = g.softmax(s, mask)?;
                let a = g.dropout(a0, pdrop, mode, rng)?;
                ctx.push(g.matmul(a, v)?);
            }
            let c = if ctx.len() == 1 { ctx[0] } else { g.concat_cols(&ctx)? };
            let o0 = g.matmul(c, p[l.out_w])?;
            let o1 = g.add_row(o0, p[l.out_b])?;
            let o = g.dropout(o1, pdrop, mode, rng)?;
            let r1 = g.add(x, o)?;
            let x1 = g.layer_norm(r1, p[l.ln1_g], p[l.ln1_b], eps)?;
            let f0 = g.matmul(x1, p[l.ff1_w])?;
            let f1 = g.add_row(f0, p[l.ff1_b])?;
            let f2 = g.gelu(f1);
            let f3 = g.matmul(f2, p[l.ff2_w])?;
            let f4 = g.add_row(f3, p[l.ff2_b])?;
            let f = g.dropout(f4, pdrop, mode, rng)?;
            let r2 = g.add(x1, f)?;
            x = g.layer_norm(r2, p[l.ln2_g], p[l.ln2_b], eps)?;
        }
        Ok(x)
    }

    /// Embeds and encodes one (text, image) pair. Text padding is dropped
    /// before encoding; masked keys and absent keys give identical outputs.
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        p: &[Var],
        seq: &TokenSequence,
        visual: &VisualTokenSet,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<Encoded> {
        let text = seq.trimmed();
        let te = self.embed_text(g, p, &text)?;
        let ve = self.embed_visual(g, p, visual)?;
        let num_visual = g.shape(ve)[0];
        let mask = vec![true; text.len() + num_visual];
        let hidden = self.encode(g, p, te, ve, &mask, mode, rng)?;
        Ok(Encoded {
            hidden,
            text_len: text.len(),
            num_visual,
        })
    }

    fn linear(&self, g: &mut Graph<'_>, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }

    /// Vocabulary logits for the given rows of `hidden`.
    pub fn mlm_logits(&self, g: &mut Graph<'_>, p: &[Var], hidden: Var, rows: &[usize]) -> Result<Var> {
        let h = g.gather_rows(hidden, rows)?;
        self.linear(g, h, p[self.ids.mlm_w], p[self.ids.mlm_b])
    }

    /// Object-class logits (`K` per row) for the given rows of `hidden`.
    pub fn moc_logits(&self, g: &mut Graph<'_>, p: &[Var], hidden: Var, rows: &[usize]) -> Result<Var> {
        let h = g.gather_rows(hidden, rows)?;
        self.linear(g, h, p[self.ids.moc_w], p[self.ids.moc_b])
    }

    /// Predicted RoI features (`visual_dim` per row).
    pub fn mrfr_pred(&self, g: &mut Graph<'_>, p: &[Var], hidden: Var, rows: &[usize]) -> Result<Var> {
        let h = g.gather_rows(hidden, rows)?;
        self.linear(g, h, p[self.ids.mrfr_w], p[self.ids.mrfr_b])
    }

    /// Raw matching logit from the `[CLS]` state, shape `[1, 1]`.
    pub fn itm_logit(&self, g: &mut Graph<'_>, p: &[Var], hidden: Var) -> Result<Var> {
        let h = g.gather_rows(hidden, &[0])?;
        self.linear(g, h, p[self.ids.itm_w], p[self.ids.itm_b])
    }

    /// `sigmoid(itm_logit)`, the image-text similarity in (0, 1).
    pub fn itm_score(&self, g: &mut Graph<'_>, p: &[Var], hidden: Var) -> Result<Var> {
        let z = self.itm_logit(g, p, hidden)?;
        Ok(g.sigmoid(z))
    }

    /// Eval-mode matching logit of one pair, without recording gradients.
    pub fn score_pair(&self, seq: &TokenSequence, visual: &VisualTokenSet) -> Result<f64> {
        let mut g = Graph::new();
        let p = self.bind_frozen(&mut g);
        let enc = self.forward(&mut g, &p, seq, visual, Mode::Eval, &mut Rng::new(0))?;
        let z = self.itm_logit(&mut g, &p, enc.hidden)?;
        Ok(g.scalar(z))
    }

    /// Binds parameters as constants so no backward bookkeeping is kept.
    pub fn bind_frozen<'a>(&'a self, g: &mut Graph<'a>) -> Vec<Var> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, (_, t))| g.frozen_param(i, t))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{Tokenizer, Vocab};

    fn visual(o: usize, dv: usize, seed: u64) -> VisualTokenSet {
        let mut r = Rng::new(seed);
        VisualTokenSet {
            features: (0..o * dv).map(|_| r.normal()).collect(),
            visual_dim: dv,
            class_labels: (0..o).map(|i| i % 3).collect(),
            boxes: (0..o)
                .map(|i| [i as f64, 2.0 * i as f64, 50.0 + i as f64, 60.0 + 3.0 * i as f64])
                .collect(),
            image_size: (100.0, 100.0),
            global_feature: Some(vec![0.5; dv]),
        }
    }

    #[test]
    fn geometry_examples() {
        assert_eq!(
            geometry_vector([0.0, 0.0, 640.0, 480.0], 640.0, 480.0).unwrap(),
            [0.0, 0.0, 1.0, 1.0, 1.0]
        );
        assert_eq!(
            geometry_vector([25.0, 25.0, 75.0, 75.0], 100.0, 100.0).unwrap(),
            [0.25, 0.25, 0.75, 0.75, 0.25]
        );
        assert!(matches!(
            geometry_vector([0.0, 0.0, 1.0, 1.0], 0.0, 5.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::tiny(20);
        c.validate().unwrap();
        c.heads = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::tiny(20);
        c.use_global_feature = true;
        c.max_seq_len = 10;
        assert!(c.validate().is_err());
        ModelConfig::base_scale().validate().unwrap();
    }

    #[test]
    fn too_many_rois_rejected() {
        let m = Model::new(ModelConfig::tiny(20), &mut Rng::new(1)).unwrap();
        let mut g = Graph::new();
        let p = m.bind(&mut g);
        assert!(matches!(
            m.embed_visual(&mut g, &p, &visual(5, 8, 0)),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn geometry_changes_visual_embedding() {
        let m = Model::new(ModelConfig::tiny(20), &mut Rng::new(1)).unwrap();
        let mut v = visual(2, 8, 3);
        let f0 = v.feature(0).to_vec();
        v.features[8..16].copy_from_slice(&f0);
        v.boxes[1] = v.boxes[0];
        let mut g = Graph::new();
        let p = m.bind(&mut g);
        let e = m.embed_visual(&mut g, &p, &v).unwrap();
        let rows = g.value(e).to_vec();
        assert_eq!(&rows[..16], &rows[16..32]);
        v.boxes[1] = [10.0, 10.0, 90.0, 20.0];
        let e2 = m.embed_visual(&mut g, &p, &v).unwrap();
        let rows2 = g.value(e2);
        assert_ne!(&rows2[..16], &rows2[16..32]);
    }

    #[test]
    fn text_embedding_is_position_sensitive() {
        let vocab = Vocab::fixture();
        let m = Model::new(ModelConfig::tiny(vocab.len()), &mut Rng::new(1)).unwrap();
        let tok = Tokenizer::new(vocab);
        let s = tok.tokenize("cat cat", 6).unwrap();
        let mut g = Graph::new();
        let p = m.bind(&mut g);
        let e = m.embed_text(&mut g, &p, &s).unwrap();
        let v = g.value(e);
        assert_ne!(&v[16..32], &v[32..48]);
        for row in v.chunks(16) {
            let mean: f64 = row.iter().sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-10);
        }
    }

    #[test]
    fn global_token_appended() {
        let mut c = ModelConfig::tiny(20);
        c.use_global_feature = true;
        c.max_seq_len = 11;
        let m = Model::new(c, &mut Rng::new(1)).unwrap();
        let mut g = Graph::new();
        let p = m.bind(&mut g);
        let e = m.embed_visual(&mut g, &p, &visual(4, 8, 0)).unwrap();
        assert_eq!(g.shape(e), &[5, 16]);
    }

    #[test]
    fn head_shapes_and_zero_init() {
        let vocab = Vocab::fixture();
        let mut m = Model::new(ModelConfig::tiny(vocab.len()), &mut Rng::new(1)).unwrap();
        let tok = Tokenizer::new(vocab.clone());
        let s = tok.tokenize("a cat", 6).unwrap();
        let v = visual(4, 8, 2);
        for name in MLM_HEAD.iter().chain(&MOC_HEAD).chain(&ITM_HEAD) {
            m.params_mut()
                .by_name_mut(name)
                .unwrap()
                .data_mut()
                .iter_mut()
                .for_each(|x| *x = 0.0);
        }
        let mut g = Graph::new();
        let p = m.bind(&mut g);
        let enc = m.forward(&mut g, &p, &s, &v, Mode::Eval, &mut Rng::new(0)).unwrap();
        let rows: Vec<usize> = (0..4).map(|i| enc.visual_row(i)).collect();
        let moc = m.moc_logits(&mut g, &p, enc.hidden, &rows).unwrap();
        assert_eq!(g.shape(moc), &[4, 5]);
        assert!(g.value(moc).iter().all(|x| *x == 0.0));
        let mlm = m.mlm_logits(&mut g, &p, enc.hidden, &[1]).unwrap();
        assert_eq!(g.shape(mlm), &[1, vocab.len()]);
        let s = m.itm_score(&mut g, &p, enc.hidden).unwrap();
        assert_eq!(g.scalar(s), 0.5);
    }
}
