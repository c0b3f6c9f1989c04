//! Frozen miniature text and vision transformers with prompt injection.
//!
//! Both towers run layers 1..=S on the plain token sequence. At layer S+1 the
//! prompt tokens are appended to the sequence; for each later layer the
//! prompt positions are either overwritten with that layer's own tokens
//! ([`DeepMode::Fresh`]) or left to flow on ([`DeepMode::Carried`]). The text
//! feature is read at the end token, the image feature at the class token.

mod prompts;
mod tokenizer;
mod weights;

pub use prompts::{init_prompts, InitMode, PromptPack, Side, INIT_PHRASE, PROMPT_INIT_STD};
pub use tokenizer::{split_words, ClassPromptSet, TokenizedQuery, Vocabulary, END, PAD, TEMPLATE, UNK};
pub use weights::{Block, BoundBlock, BoundText, BoundVision, EncoderWeights, TextTower, VisionTower};

use crate::error::{Error, Result};
use crate::image_adapter::{adapt, AdapterConfig, ImageGrid};
use crate::tensor::{Real, Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

/// Additive attention bias for padding keys.
const MASKED: f32 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeepMode {
    Fresh,
    Carried,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    /// T
    pub max_text_len: usize,
    pub d_lang: usize,
    pub d_vis: usize,
    pub d_joint: usize,
    /// K
    pub n_layers: usize,
    /// S; prompts join at layer S+1.
    pub prompt_depth: usize,
    pub n_heads: usize,
    /// M, patches per image side.
    pub patch_grid: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub mlp_ratio: usize,
    pub temperature: f32,
    pub deep_mode: DeepMode,
    pub ln_eps: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Laptop-scale preset used by the harness and tests.
    pub fn desk() -> Self {
        Self {
            vocab_size: 64,
            max_text_len: 8,
            d_lang: 32,
            d_vis: 48,
            d_joint: 32,
            n_layers: 4,
            prompt_depth: 1,
            n_heads: 4,
            patch_grid: 4,
            patch_size: 8,
            channels: 3,
            mlp_ratio: 4,
            temperature: 0.01,
            deep_mode: DeepMode::Fresh,
            ln_eps: 1e-5,
        }
    }

    /// ViT-B/16-sized preset: 224×224 input, 14×14 patches.
    pub fn full_scale() -> Self {
        Self {
            vocab_size: 49408,
            max_text_len: 77,
            d_lang: 512,
            d_vis: 768,
            d_joint: 512,
            n_layers: 12,
            prompt_depth: 8,
            n_heads: 8,
            patch_grid: 14,
            patch_size: 16,
            channels: 3,
            mlp_ratio: 4,
            temperature: 0.01,
            deep_mode: DeepMode::Fresh,
            ln_eps: 1e-5,
        }
    }

    pub fn image_side(&self) -> usize {
        self.patch_grid * self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.patch_grid * self.patch_grid
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    /// Layers S+1..=K, each with its own prompt tokens.
    pub fn prompted_layers(&self) -> usize {
        self.n_layers - self.prompt_depth
    }

    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        let positive = [
            ("vocab_size", self.vocab_size),
            ("max_text_len", self.max_text_len),
            ("d_lang", self.d_lang),
            ("d_vis", self.d_vis),
            ("d_joint", self.d_joint),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("patch_grid", self.patch_grid),
            ("patch_size", self.patch_size),
            ("mlp_ratio", self.mlp_ratio),
        ];
        for (name, v) in positive {
            if v == 0 {
                p.push(format!("model.{name} must be positive"));
            }
        }
        if self.prompt_depth >= self.n_layers {
            p.push(format!(
                "model.prompt_depth ({}) must be below n_layers ({})",
                self.prompt_depth, self.n_layers
            ));
        }
        if self.n_heads > 0 {
            for (name, d) in [("d_lang", self.d_lang), ("d_vis", self.d_vis)] {
                if d % self.n_heads != 0 {
                    p.push(format!("model.{name} ({d}) must be divisible by n_heads ({})", self.n_heads));
                }
            }
        }
        if !(self.channels == 1 || self.channels == 3) {
            p.push(format!("model.channels must be 1 or 3, got {}", self.channels));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            p.push(format!("model.temperature must be > 0, got {}", self.temperature));
        }
        if !(self.ln_eps > 0.0) {
            p.push("model.ln_eps must be > 0".into());
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(p))
        }
    }
}

/// Multi-head self-attention plus MLP, both pre-normed with residuals.
pub fn block_forward<T: Real>(
    g: &mut Graph<T>,
    b: &BoundBlock,
    x: Var,
    mask: Option<Var>,
    n_heads: usize,
    eps: f32,
) -> Result<Var> {
    let d = g.shape(x)[1];
    let dh = d / n_heads;
    let h = g.layernorm(x, b.ln1_gain, b.ln1_bias, eps)?;
    let q = g.matmul(h, b.wq)?;
    let q = g.add_row(q, b.bq)?;
    let k = g.matmul(h, b.wk)?;
    let k = g.add_row(k, b.bk)?;
    let v = g.matmul(h, b.wv)?;
    let v = g.add_row(v, b.bv)?;
    let scale = 1.0 / (dh as f32).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    for hd in 0..n_heads {
        let qh = g.slice(q, 1, hd * dh, dh)?;
        let kh = g.slice(k, 1, hd * dh, dh)?;
        let vh = g.slice(v, 1, hd * dh, dh)?;
        let kt = g.transpose(kh)?;
        let s = g.matmul(qh, kt)?;
        let mut s = g.scale(s, scale)?;
        if let Some(m) = mask {
            s = g.add(s, m)?;
        }
        let a = g.softmax(s, 1)?;
        heads.push(g.matmul(a, vh)?);
    }
    let o = g.concat(&heads, 1)?;
    let o = g.matmul(o, b.wo)?;
    let o = g.add_row(o, b.bo)?;
    let x = g.add(x, o)?;

    let h = g.layernorm(x, b.ln2_gain, b.ln2_bias, eps)?;
    let f = g.matmul(h, b.w_fc)?;
    let f = g.add_row(f, b.b_fc)?;
    let f = g.gelu(f)?;
    let f = g.matmul(f, b.w_out)?;
    let f = g.add_row(f, b.b_out)?;
    g.add(x, f)
}

fn check_prompts<T: Real>(cfg: &ModelConfig, prompts: &[Var], g: &Graph<T>, width: usize, m: usize) -> Result<()> {
    if prompts.len() != cfg.prompted_layers() {
        return Err(Error::dim(
            "prompt depth",
            &[cfg.prompted_layers()],
            &[prompts.len()],
        ));
    }
    for &p in prompts {
        if g.shape(p) != [m, width] {
            return Err(Error::dim("prompt tokens", &[m, width], g.shape(p)));
        }
    }
    Ok(())
}

/// Runs the layer stack, joining `prompts` (one entry per layer S+1..=K) at
/// layer S+1. Returns the final sequence; prompt positions, if any, are last.
fn run_layers<T: Real>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    blocks: &[BoundBlock],
    mut x: Var,
    prompts: &[Var],
    mask: impl Fn(&mut Graph<T>, usize) -> Result<Option<Var>>,
) -> Result<Var> {
    let base = g.shape(x)[0];
    for (layer, b) in blocks.iter().enumerate() {
        if !prompts.is_empty() && layer >= cfg.prompt_depth {
            let depth = layer - cfg.prompt_depth;
            if depth == 0 {
                x = g.concat(&[x, prompts[0]], 0)?;
            } else if cfg.deep_mode == DeepMode::Fresh {
                let kept = g.slice(x, 0, 0, base)?;
                x = g.concat(&[kept, prompts[depth]], 0)?;
            }
        }
        let n = g.shape(x)[0];
        let m = mask(g, n)?;
        x = block_forward(g, b, x, m, cfg.n_heads, cfg.ln_eps)?;
    }
    Ok(x)
}

/// Token plus positional embedding of a tokenized query, `[T × d_lang]`.
pub fn embed_tokens<T: Real>(g: &mut Graph<T>, text: &BoundText, query: &TokenizedQuery) -> Result<Var> {
    let w = g.gather_rows(text.token_embedding, &query.ids)?;
    g.add(w, text.positional)
}

/// Text feature `[1 × d_joint]` of one query inside an existing graph.
/// `prompts` holds the bound language tokens (empty for the zero-shot path).
pub fn text_forward<T: Real>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    text: &BoundText,
    query: &TokenizedQuery,
    prompts: &[Var],
) -> Result<Var> {
    if query.ids.len() != cfg.max_text_len {
        return Err(Error::dim("query length", &[cfg.max_text_len], &[query.ids.len()]));
    }
    if !prompts.is_empty() {
        let m = g.shape(prompts[0])[0];
        check_prompts(cfg, prompts, g, cfg.d_lang, m)?;
    }
    let x = embed_tokens(g, text, query)?;
    let t = cfg.max_text_len;
    let end = query.end_pos;
    // Keys after the end token are padding; prompt keys stay visible.
    let mask = |g: &mut Graph<T>, n: usize| -> Result<Option<Var>> {
        if end + 1 == t {
            return Ok(None);
        }
        let mut data = vec![0.0f32; n * n];
        for row in data.chunks_mut(n) {
            for v in &mut row[end + 1..t] {
                *v = MASKED;
            }
        }
        Ok(Some(g.constant(vec![n, n], data)?))
    };
    let x = run_layers(g, cfg, &text.blocks, x, prompts, mask)?;
    let e = g.slice(x, 0, end, 1)?;
    let e = g.layernorm(e, text.ln_final_gain, text.ln_final_bias, cfg.ln_eps)?;
    g.matmul(e, text.projection)
}

/// Non-overlapping patches flattened channel-major: `[M² × C·p²]`.
pub fn patchify(img: &ImageGrid, cfg: &ModelConfig) -> Result<Tensor> {
    let side = cfg.image_side();
    if img.height() != side || img.width() != side || img.channels() != cfg.channels {
        return Err(Error::dim(
            "image size",
            &[cfg.channels, side, side],
            &[img.channels(), img.height(), img.width()],
        ));
    }
    let (p, mgrid) = (cfg.patch_size, cfg.patch_grid);
    let mut data = Vec::with_capacity(cfg.num_patches() * cfg.patch_dim());
    for py in 0..mgrid {
        for px in 0..mgrid {
            for c in 0..cfg.channels {
                for y in 0..p {
                    for x in 0..p {
                        data.push(img.get(c, py * p + y, px * p + x));
                    }
                }
            }
        }
    }
    Tensor::new(vec![cfg.num_patches(), cfg.patch_dim()], data)
}

/// Image feature `[1 × d_joint]` inside an existing graph. The image is used
/// as given; apply the adapter beforehand if wanted.
pub fn vision_forward<T: Real>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    vision: &BoundVision,
    img: &ImageGrid,
    prompts: &[Var],
) -> Result<Var> {
    let patches = patchify(img, cfg)?;
    vision_forward_patches(g, cfg, vision, &patches, prompts)
}

pub fn vision_forward_patches<T: Real>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    vision: &BoundVision,
    patches: &Tensor,
    prompts: &[Var],
) -> Result<Var> {
    if !prompts.is_empty() {
        let m = g.shape(prompts[0])[0];
        check_prompts(cfg, prompts, g, cfg.d_vis, m)?;
    }
    let p = g.leaf(patches);
    let e = g.matmul(p, vision.patch_embedding)?;
    let x = g.concat(&[vision.class_token, e], 0)?;
    let x = g.add(x, vision.positional)?;
    let x = g.layernorm(x, vision.ln_pre_gain, vision.ln_pre_bias, cfg.ln_eps)?;
    let x = run_layers(g, cfg, &vision.blocks, x, prompts, |_, _| Ok(None))?;
    let c = g.slice(x, 0, 0, 1)?;
    let c = g.layernorm(c, vision.ln_post_gain, vision.ln_post_bias, cfg.ln_eps)?;
    g.matmul(c, vision.projection)
}

fn to_vector<T: Real>(g: &Graph<T>, v: Var) -> Result<Tensor> {
    let t = g.tensor(v);
    let n = t.len();
    let t = t.reshape(vec![n])?;
    if !t.is_finite() {
        return Err(Error::Numeric("encoder produced a non-finite feature".into()));
    }
    Ok(t)
}

/// `[T × d_lang]` embedding of a raw query.
pub fn tokenize_embed(text: &TextTower, cfg: &ModelConfig, vocab: &Vocabulary, query: &str) -> Result<Tensor> {
    let q = vocab.tokenize(query, cfg.max_text_len);
    let mut g = Graph::new();
    let bound = text.bind(&mut g);
    let v = embed_tokens(&mut g, &bound, &q)?;
    Ok(g.tensor(v))
}

/// Text feature `[d_joint]` of one tokenized query, optionally prompted.
pub fn encode_text(
    text: &TextTower,
    cfg: &ModelConfig,
    query: &TokenizedQuery,
    prompts: Option<&PromptPack>,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let bound = text.bind(&mut g);
    let pv = match prompts {
        Some(p) if p.prompt_length() > 0 => p.bind(&mut g, Side::Language),
        _ => Vec::new(),
    };
    let f = text_forward(&mut g, cfg, &bound, query, &pv)?;
    to_vector(&g, f)
}

/// Image feature `[d_joint]`, optionally through the adapter and prompted.
pub fn encode_image(
    vision: &VisionTower,
    cfg: &ModelConfig,
    img: &ImageGrid,
    prompts: Option<&PromptPack>,
    adapter: Option<&AdapterConfig>,
) -> Result<Tensor> {
    let fused;
    let input = match adapter {
        Some(a) => {
            fused = adapt(img, a)?;
            &fused
        }
        None => img,
    };
    let mut g = Graph::new();
    let bound = vision.bind(&mut g);
    let pv = match prompts {
        Some(p) if p.prompt_length() > 0 => p.bind(&mut g, Side::Vision),
        _ => Vec::new(),
    };
    let f = vision_forward(&mut g, cfg, &bound, input, &pv)?;
    to_vector(&g, f)
}
