use super::tokenizer::Vocabulary;
use super::weights::TextTower;
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{Real, checksum_named, Graph, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// Standard deviation of randomly initialised prompt tokens.
pub const PROMPT_INIT_STD: f32 = 0.02;

/// Words used by [`InitMode::EmbedText`] to seed the language prompt.
pub const INIT_PHRASE: &str = "a photo of a";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    RandomGauss,
    EmbedText,
}

/// The learnable prompt tokens.
///
/// `language[0]` is D, joined to the text sequence at layer S+1;
/// `language[1..]` replace the prompt positions at layers S+2..K. The vision
/// side mirrors this with G. A pack with `m == 0` holds no tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptPack {
    m: usize,
    language: Vec<Tensor>,
    vision: Vec<Tensor>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Language,
    Vision,
}

impl PromptPack {
    pub fn empty() -> Self {
        Self {
            m: 0,
            language: Vec::new(),
            vision: Vec::new(),
        }
    }

    pub fn prompt_length(&self) -> usize {
        self.m
    }

    pub fn language(&self) -> &[Tensor] {
        &self.language
    }

    pub fn vision(&self) -> &[Tensor] {
        &self.vision
    }

    pub fn side(&self, side: Side) -> &[Tensor] {
        match side {
            Side::Language => &self.language,
            Side::Vision => &self.vision,
        }
    }

    pub fn side_mut(&mut self, side: Side) -> &mut [Tensor] {
        match side {
            Side::Language => &mut self.language,
            Side::Vision => &mut self.vision,
        }
    }

    /// D, the first language prompt.
    pub fn d(&self) -> Option<&Tensor> {
        self.language.first()
    }

    /// G, the first vision prompt.
    pub fn g(&self) -> Option<&Tensor> {
        self.vision.first()
    }

    /// Copy with one side's tensors removed, so that side is not injected.
    pub fn without(&self, side: Side) -> Self {
        let mut p = self.clone();
        match side {
            Side::Language => p.language.clear(),
            Side::Vision => p.vision.clear(),
        }
        p
    }

    pub fn set_trainable(&mut self, side: Side, trainable: bool) {
        for t in self.side_mut(side) {
            t.set_trainable(trainable);
        }
    }

    pub fn freeze_all(&mut self) {
        self.set_trainable(Side::Language, false);
        self.set_trainable(Side::Vision, false);
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let lang = self
            .language
            .iter()
            .enumerate()
            .map(|(i, t)| (format!("prompt.language.{i}"), t));
        let vis = self
            .vision
            .iter()
            .enumerate()
            .map(|(i, t)| (format!("prompt.vision.{i}"), t));
        lang.chain(vis).collect()
    }

    pub fn checksum(&self, side: Side) -> String {
        let names: Vec<(String, &Tensor)> = self
            .side(side)
            .iter()
            .enumerate()
            .map(|(i, t)| (i.to_string(), t))
            .collect();
        checksum_named(names.iter().map(|(n, t)| (n.as_str(), *t)))
    }

    pub fn bind<T: Real>(&self, g: &mut Graph<T>, side: Side) -> Vec<Var> {
        self.side(side).iter().map(|t| g.leaf(t)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.language.iter().chain(&self.vision).all(Tensor::is_finite)
    }

    /// Rebuilds a pack from archive entries named as by [`Self::named_tensors`].
    pub fn from_named(cfg: &ModelConfig, m: usize, entries: Vec<(String, Tensor)>) -> Result<Self> {
        let mut map: HashMap<String, Tensor> = entries.into_iter().collect();
        let depth = if m == 0 { 0 } else { cfg.prompted_layers() };
        let mut take = |side: &str, d: usize| -> Result<Vec<Tensor>> {
            (0..depth)
                .map(|i| {
                    let name = format!("prompt.{side}.{i}");
                    let t = map
                        .remove(&name)
                        .ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
                    if t.shape() != [m, d] {
                        return Err(Error::dim("load prompts", &[m, d], t.shape()));
                    }
                    Ok(t)
                })
                .collect()
        };
        let language = take("language", cfg.d_lang)?;
        let vision = take("vision", cfg.d_vis)?;
        if let Some(extra) = map.keys().next() {
            return Err(Error::Format(format!("unexpected tensor {extra}")));
        }
        Ok(Self { m, language, vision })
    }
}

/// Fresh prompt tokens for prompt length `m`.
///
/// Random tokens are drawn from N(0, 0.02²) in a fixed order: language tokens
/// first, then vision tokens. With [`InitMode::EmbedText`], D instead takes the
/// token embeddings of "a photo of a" (first `m` words; further rows stay
/// random). All tensors come back trainable; the trainer narrows this per
/// phase.
pub fn init_prompts(
    cfg: &ModelConfig,
    m: usize,
    seed: u64,
    mode: InitMode,
    text: &TextTower,
    vocab: &Vocabulary,
) -> Result<PromptPack> {
    if m == 0 {
        return Ok(PromptPack::empty());
    }
    let depth = cfg.prompted_layers();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut language = (0..depth)
        .map(|_| Tensor::randn(vec![m, cfg.d_lang], PROMPT_INIT_STD, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let vision = (0..depth)
        .map(|_| Tensor::randn(vec![m, cfg.d_vis], PROMPT_INIT_STD, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    if mode == InitMode::EmbedText {
        let words = super::tokenizer::split_words(INIT_PHRASE);
        let d = cfg.d_lang;
        let data = language[0].data_mut();
        for (row, w) in words.iter().take(m).enumerate() {
            let id = vocab.id(w);
            data[row * d..(row + 1) * d].copy_from_slice(text.token_embedding.row(id));
        }
    }
    let mut pack = PromptPack { m, language, vision };
    pack.set_trainable(Side::Language, true);
    pack.set_trainable(Side::Vision, true);
    Ok(pack)
}
