use super::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{Real, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use std::collections::HashMap;

/// One pre-LayerNorm transformer layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub w_fc: Tensor,
    pub b_fc: Tensor,
    pub w_out: Tensor,
    pub b_out: Tensor,
}

const BLOCK_FIELDS: [&str; 16] = [
    "ln1_gain", "ln1_bias", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln2_gain", "ln2_bias",
    "w_fc", "b_fc", "w_out", "b_out",
];

fn linear<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Result<Tensor> {
    Tensor::randn(vec![rows, cols], 1.0 / (rows as f32).sqrt(), rng)
}

impl Block {
    pub fn init<R: Rng + ?Sized>(d: usize, mlp_ratio: usize, rng: &mut R) -> Result<Self> {
        let h = d * mlp_ratio;
        Ok(Self {
            ln1_gain: Tensor::filled(vec![d], 1.0)?,
            ln1_bias: Tensor::zeros(vec![d])?,
            wq: linear(d, d, rng)?,
            bq: Tensor::zeros(vec![d])?,
            wk: linear(d, d, rng)?,
            bk: Tensor::zeros(vec![d])?,
            wv: linear(d, d, rng)?,
            bv: Tensor::zeros(vec![d])?,
            wo: linear(d, d, rng)?,
            bo: Tensor::zeros(vec![d])?,
            ln2_gain: Tensor::filled(vec![d], 1.0)?,
            ln2_bias: Tensor::zeros(vec![d])?,
            w_fc: linear(d, h, rng)?,
            b_fc: Tensor::zeros(vec![h])?,
            w_out: linear(h, d, rng)?,
            b_out: Tensor::zeros(vec![d])?,
        })
    }

    fn fields(&self) -> [&Tensor; 16] {
        [
            &self.ln1_gain, &self.ln1_bias, &self.wq, &self.bq, &self.wk, &self.bk, &self.wv,
            &self.bv, &self.wo, &self.bo, &self.ln2_gain, &self.ln2_bias, &self.w_fc, &self.b_fc,
            &self.w_out, &self.b_out,
        ]
    }

    fn fields_mut(&mut self) -> [&mut Tensor; 16] {
        [
            &mut self.ln1_gain, &mut self.ln1_bias, &mut self.wq, &mut self.bq, &mut self.wk,
            &mut self.bk, &mut self.wv, &mut self.bv, &mut self.wo, &mut self.bo,
            &mut self.ln2_gain, &mut self.ln2_bias, &mut self.w_fc, &mut self.b_fc,
            &mut self.w_out, &mut self.b_out,
        ]
    }

    pub fn bind<T: Real>(&self, g: &mut Graph<T>) -> BoundBlock {
        let v = self.fields().map(|t| g.leaf(t));
        BoundBlock {
            ln1_gain: v[0],
            ln1_bias: v[1],
            wq: v[2],
            bq: v[3],
            wk: v[4],
            bk: v[5],
            wv: v[6],
            bv: v[7],
            wo: v[8],
            bo: v[9],
            ln2_gain: v[10],
            ln2_bias: v[11],
            w_fc: v[12],
            b_fc: v[13],
            w_out: v[14],
            b_out: v[15],
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundBlock {
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
    pub w_fc: Var,
    pub b_fc: Var,
    pub w_out: Var,
    pub b_out: Var,
}

/// Text branch: token and positional embeddings, layers, final norm and the
/// projection into the joint space.
#[derive(Clone, Debug, PartialEq)]
pub struct TextTower {
    pub token_embedding: Tensor,
    pub positional: Tensor,
    pub blocks: Vec<Block>,
    pub ln_final_gain: Tensor,
    pub ln_final_bias: Tensor,
    pub projection: Tensor,
}

/// Vision branch: patch embedding, class token, positional embeddings,
/// layers, norms and the projection into the joint space.
#[derive(Clone, Debug, PartialEq)]
pub struct VisionTower {
    pub patch_embedding: Tensor,
    pub class_token: Tensor,
    pub positional: Tensor,
    pub ln_pre_gain: Tensor,
    pub ln_pre_bias: Tensor,
    pub blocks: Vec<Block>,
    pub ln_post_gain: Tensor,
    pub ln_post_bias: Tensor,
    pub projection: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderWeights {
    pub text: TextTower,
    pub vision: VisionTower,
}

pub struct BoundText {
    pub token_embedding: Var,
    pub positional: Var,
    pub blocks: Vec<BoundBlock>,
    pub ln_final_gain: Var,
    pub ln_final_bias: Var,
    pub projection: Var,
}

pub struct BoundVision {
    pub patch_embedding: Var,
    pub class_token: Var,
    pub positional: Var,
    pub ln_pre_gain: Var,
    pub ln_pre_bias: Var,
    pub blocks: Vec<BoundBlock>,
    pub ln_post_gain: Var,
    pub ln_post_bias: Var,
    pub projection: Var,
}

fn block_entries<'a>(prefix: &str, blocks: &'a [Block], out: &mut Vec<(String, &'a Tensor)>) {
    for (i, b) in blocks.iter().enumerate() {
        for (name, t) in BLOCK_FIELDS.iter().zip(b.fields()) {
            out.push((format!("{prefix}.blocks.{i}.{name}"), t));
        }
    }
}

fn block_entries_mut<'a>(prefix: &str, blocks: &'a mut [Block], out: &mut Vec<(String, &'a mut Tensor)>) {
    for (i, b) in blocks.iter_mut().enumerate() {
        for (name, t) in BLOCK_FIELDS.iter().zip(b.fields_mut()) {
            out.push((format!("{prefix}.blocks.{i}.{name}"), t));
        }
    }
}

impl TextTower {
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let d = cfg.d_lang;
        Ok(Self {
            token_embedding: Tensor::randn(vec![cfg.vocab_size, d], 0.5, rng)?,
            positional: Tensor::randn(vec![cfg.max_text_len, d], 0.1, rng)?,
            blocks: (0..cfg.n_layers)
                .map(|_| Block::init(d, cfg.mlp_ratio, rng))
                .collect::<Result<_>>()?,
            ln_final_gain: Tensor::filled(vec![d], 1.0)?,
            ln_final_bias: Tensor::zeros(vec![d])?,
            projection: linear(d, cfg.d_joint, rng)?,
        })
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("text.token_embedding".to_string(), &self.token_embedding),
            ("text.positional".to_string(), &self.positional),
        ];
        block_entries("text", &self.blocks, &mut out);
        out.push(("text.ln_final_gain".into(), &self.ln_final_gain));
        out.push(("text.ln_final_bias".into(), &self.ln_final_bias));
        out.push(("text.projection".into(), &self.projection));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![
            ("text.token_embedding".to_string(), &mut self.token_embedding),
            ("text.positional".to_string(), &mut self.positional),
        ];
        block_entries_mut("text", &mut self.blocks, &mut out);
        out.push(("text.ln_final_gain".into(), &mut self.ln_final_gain));
        out.push(("text.ln_final_bias".into(), &mut self.ln_final_bias));
        out.push(("text.projection".into(), &mut self.projection));
        out
    }

    pub fn bind<T: Real>(&self, g: &mut Graph<T>) -> BoundText {
        BoundText {
            token_embedding: g.leaf(&self.token_embedding),
            positional: g.leaf(&self.positional),
            blocks: self.blocks.iter().map(|b| b.bind(g)).collect(),
            ln_final_gain: g.leaf(&self.ln_final_gain),
            ln_final_bias: g.leaf(&self.ln_final_bias),
            projection: g.leaf(&self.projection),
        }
    }
}

impl VisionTower {
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let d = cfg.d_vis;
        Ok(Self {
            patch_embedding: linear(cfg.patch_dim(), d, rng)?,
            class_token: Tensor::randn(vec![1, d], 0.5, rng)?,
            positional: Tensor::randn(vec![cfg.num_patches() + 1, d], 0.1, rng)?,
            ln_pre_gain: Tensor::filled(vec![d], 1.0)?,
            ln_pre_bias: Tensor::zeros(vec![d])?,
            blocks: (0..cfg.n_layers)
                .map(|_| Block::init(d, cfg.mlp_ratio, rng))
                .collect::<Result<_>>()?,
            ln_post_gain: Tensor::filled(vec![d], 1.0)?,
            ln_post_bias: Tensor::zeros(vec![d])?,
            projection: linear(d, cfg.d_joint, rng)?,
        })
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("vision.patch_embedding".to_string(), &self.patch_embedding),
            ("vision.class_token".to_string(), &self.class_token),
            ("vision.positional".to_string(), &self.positional),
            ("vision.ln_pre_gain".to_string(), &self.ln_pre_gain),
            ("vision.ln_pre_bias".to_string(), &self.ln_pre_bias),
        ];
        block_entries("vision", &self.blocks, &mut out);
        out.push(("vision.ln_post_gain".into(), &self.ln_post_gain));
        out.push(("vision.ln_post_bias".into(), &self.ln_post_bias));
        out.push(("vision.projection".into(), &self.projection));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![
            ("vision.patch_embedding".to_string(), &mut self.patch_embedding),
            ("vision.class_token".to_string(), &mut self.class_token),
            ("vision.positional".to_string(), &mut self.positional),
            ("vision.ln_pre_gain".to_string(), &mut self.ln_pre_gain),
            ("vision.ln_pre_bias".to_string(), &mut self.ln_pre_bias),
        ];
        block_entries_mut("vision", &mut self.blocks, &mut out);
        out.push(("vision.ln_post_gain".into(), &mut self.ln_post_gain));
        out.push(("vision.ln_post_bias".into(), &mut self.ln_post_bias));
        out.push(("vision.projection".into(), &mut self.projection));
        out
    }

    pub fn bind<T: Real>(&self, g: &mut Graph<T>) -> BoundVision {
        BoundVision {
            patch_embedding: g.leaf(&self.patch_embedding),
            class_token: g.leaf(&self.class_token),
            positional: g.leaf(&self.positional),
            ln_pre_gain: g.leaf(&self.ln_pre_gain),
            ln_pre_bias: g.leaf(&self.ln_pre_bias),
            blocks: self.blocks.iter().map(|b| b.bind(g)).collect(),
            ln_post_gain: g.leaf(&self.ln_post_gain),
            ln_post_bias: g.leaf(&self.ln_post_bias),
            projection: g.leaf(&self.projection),
        }
    }
}

impl EncoderWeights {
    /// Seeded random backbone. Every tensor is frozen.
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut w = Self {
            text: TextTower::init(cfg, rng)?,
            vision: VisionTower::init(cfg, rng)?,
        };
        w.set_trainable(false);
        Ok(w)
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.text.named_tensors();
        out.extend(self.vision.named_tensors());
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = self.text.named_tensors_mut();
        out.extend(self.vision.named_tensors_mut());
        out
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        for (_, t) in self.named_tensors_mut() {
            t.set_trainable(trainable);
        }
    }

    /// Per-tensor checksums in a fixed order.
    pub fn checksums(&self) -> Vec<(String, String)> {
        self.named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.checksum()))
            .collect()
    }

    pub fn checksum(&self) -> String {
        crate::tensor::checksum_named(self.named_tensors().iter().map(|(n, t)| (n.as_str(), *t)))
    }

    /// Rebuilds weights from archive entries, checking every name and shape
    /// against a freshly shaped skeleton for `cfg`.
    pub fn from_named(cfg: &ModelConfig, entries: Vec<(String, Tensor)>) -> Result<Self> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut w = Self::init(cfg, &mut rng)?;
        let mut map: HashMap<String, Tensor> = entries.into_iter().collect();
        for (name, slot) in w.named_tensors_mut() {
            let t = map
                .remove(&name)
                .ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
            if t.shape() != slot.shape() {
                return Err(Error::dim("load weights", slot.shape(), t.shape()));
            }
            *slot = t.with_trainable(false);
        }
        if let Some(extra) = map.keys().next() {
            return Err(Error::Format(format!("unexpected tensor {extra}")));
        }
        Ok(w)
    }
}

impl BoundBlock {
    fn vars(&self) -> [Var; 16] {
        [
            self.ln1_gain, self.ln1_bias, self.wq, self.bq, self.wk, self.bk, self.wv, self.bv,
            self.wo, self.bo, self.ln2_gain, self.ln2_bias, self.w_fc, self.b_fc, self.w_out,
            self.b_out,
        ]
    }
}

impl BoundText {
    /// Vars in the order of [`TextTower::named_tensors`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.token_embedding, self.positional];
        out.extend(self.blocks.iter().flat_map(BoundBlock::vars));
        out.extend([self.ln_final_gain, self.ln_final_bias, self.projection]);
        out
    }
}

impl BoundVision {
    /// Vars in the order of [`VisionTower::named_tensors`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![
            self.patch_embedding,
            self.class_token,
            self.positional,
            self.ln_pre_gain,
            self.ln_pre_bias,
        ];
        out.extend(self.blocks.iter().flat_map(BoundBlock::vars));
        out.extend([self.ln_post_gain, self.ln_post_bias, self.projection]);
        out
    }
}
