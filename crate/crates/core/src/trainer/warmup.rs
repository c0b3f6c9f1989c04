//! Short contrastive pretraining of a seeded-random backbone, so that its
//! zero-shot predictions carry some signal before prompts are learned.

use crate::clip_head::{graph_ce, graph_log_probs, graph_logits};
use crate::encoders::{text_forward, vision_forward, ClassPromptSet, EncoderWeights, ModelConfig};
use crate::image_adapter::ImageGrid;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WarmupConfig {
    /// Seed of the random backbone.
    pub weights_seed: u64,
    /// Zero disables warming.
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for WarmupConfig {
    fn default() -> Self {
        Self {
            weights_seed: 0,
            epochs: 5,
            learning_rate: 1e-3,
            batch_size: 8,
            seed: 0,
        }
    }
}

impl WarmupConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            p.push(format!("warmup.learning_rate must be > 0, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            p.push("warmup.batch_size must be positive".into());
        }
        p
    }
}

struct Adam {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: i32,
}

impl Adam {
    const B1: f32 = 0.9;
    const B2: f32 = 0.999;
    const EPS: f32 = 1e-8;

    fn new(sizes: &[usize]) -> Self {
        Self {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [&mut Tensor], grads: &[Vec<f32>], lr: f32) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = Self::B1 * m[j] + (1.0 - Self::B1) * g[j];
                v[j] = Self::B2 * v[j] + (1.0 - Self::B2) * g[j] * g[j];
                *w -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + Self::EPS);
            }
        }
    }
}

/// Trains a copy of `weights` with image-to-class-text cross-entropy on the
/// given images, then returns it frozen. `weights` is not touched.
pub fn warm_backbone(
    weights: &EncoderWeights,
    cfg: &ModelConfig,
    classes: &ClassPromptSet,
    images: &[&ImageGrid],
    labels: &[usize],
    wcfg: &WarmupConfig,
) -> Result<EncoderWeights> {
    if images.len() != labels.len() {
        return Err(Error::dim("warmup images", &[labels.len()], &[images.len()]));
    }
    let mut w = weights.clone();
    if wcfg.epochs == 0 {
        return Ok(w);
    }
    w.set_trainable(true);
    let sizes: Vec<usize> = w.named_tensors().iter().map(|(_, t)| t.len()).collect();
    let mut adam = Adam::new(&sizes);
    let mut rng = ChaCha8Rng::seed_from_u64(wcfg.seed);
    let mut order: Vec<usize> = (0..labels.len()).collect();
    for _ in 0..wcfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(wcfg.batch_size) {
            let mut g = Graph::new();
            let bt = w.text.bind(&mut g);
            let bv = w.vision.bind(&mut g);
            let rows = classes
                .queries
                .iter()
                .map(|q| text_forward(&mut g, cfg, &bt, q, &[]))
                .collect::<Result<Vec<_>>>()?;
            let z = g.concat(&rows, 0)?;
            let feats = batch
                .iter()
                .map(|&i| vision_forward(&mut g, cfg, &bv, images[i], &[]))
                .collect::<Result<Vec<_>>>()?;
            let f = g.concat(&feats, 0)?;
            let logits = graph_logits(&mut g, z, f)?;
            let lp = graph_log_probs(&mut g, logits, cfg.temperature)?;
            let batch_labels: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let loss = graph_ce(&mut g, lp, &batch_labels)?;
            if !g.scalar(loss).is_finite() {
                return Err(Error::Divergence("non-finite loss while warming the backbone".into()));
            }
            let grads = g.backward(loss)?;
            let vars: Vec<_> = bt.vars().into_iter().chain(bv.vars()).collect();
            let gs: Vec<Vec<f32>> = vars
                .iter()
                .map(|&v| grads.get(v).map(<[f32]>::to_vec).unwrap_or_default())
                .collect();
            let mut params: Vec<&mut Tensor> = w.named_tensors_mut().into_iter().map(|(_, t)| t).collect();
            adam.step(&mut params, &gs, wcfg.learning_rate as f32);
        }
    }
    w.set_trainable(false);
    Ok(w)
}
