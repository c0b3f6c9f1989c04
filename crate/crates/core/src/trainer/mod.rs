//! Two-stage prompt training on a frozen backbone.
//!
//! Stage 1 trains one modality at a time (language phase with λ_d, vision
//! phase with λ_g) against cached zero-shot predictions; stage 2 trains both
//! prompt sets together with cross-entropy only. Optimisation is plain
//! mini-batch SGD with per-epoch shuffles derived from the seed.

mod warmup;

pub use warmup::{warm_backbone, WarmupConfig};

use crate::clip_head::{
    graph_log_probs, graph_logits, graph_stage1_loss, graph_stage2_loss, predict, similarity, KlDirection,
    LossParts, Prediction, Provenance,
};
use crate::encoders::{
    text_forward, vision_forward, ClassPromptSet, EncoderWeights, InitMode, ModelConfig, PromptPack, Side,
    TextTower, VisionTower, Vocabulary,
};
use crate::error::{Error, Result};
use crate::eval_harness::Dataset;
use crate::image_adapter::{adapt, AdapterConfig, ImageGrid};
use crate::tensor::{hex, Graph, Real, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::HashMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Both,
    LanguageOnly,
    VisionOnly,
}

impl Mode {
    pub fn uses(self, side: Side) -> bool {
        !matches!(
            (self, side),
            (Mode::LanguageOnly, Side::Vision) | (Mode::VisionOnly, Side::Language)
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Order {
    LanguageFirst,
    VisionFirst,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherInput {
    RawImage,
    FusedImage,
}

/// What the second stage-1 phase sees on the side trained first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SecondPhaseInit {
    /// The prompts produced by the first phase.
    Resume,
    /// The initial prompts, as if the first phase had not run.
    FromScratch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: Mode,
    pub lambda_d: f64,
    pub lambda_g: f64,
    pub learning_rate: f64,
    pub epochs_stage1_lang: usize,
    pub epochs_stage1_vis: usize,
    pub epochs_stage2: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub order: Order,
    pub teacher_input: TeacherInput,
    pub shots: usize,
    pub kl_direction: KlDirection,
    pub second_phase_init: SecondPhaseInit,
    pub prompt_length: usize,
    pub init_mode: InitMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Both,
            lambda_d: 0.5,
            lambda_g: 0.3,
            learning_rate: 0.05,
            epochs_stage1_lang: 6,
            epochs_stage1_vis: 6,
            epochs_stage2: 6,
            batch_size: 8,
            seed: 0,
            order: Order::LanguageFirst,
            teacher_input: TeacherInput::RawImage,
            shots: 16,
            kl_direction: KlDirection::TeacherFirst,
            second_phase_init: SecondPhaseInit::Resume,
            prompt_length: 2,
            init_mode: InitMode::RandomGauss,
        }
    }
}

impl TrainConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        for (name, v) in [("lambda_d", self.lambda_d), ("lambda_g", self.lambda_g)] {
            if !(v >= 0.0 && v.is_finite()) {
                p.push(format!("train.{name} must be >= 0, got {v}"));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            p.push(format!("train.learning_rate must be > 0, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            p.push("train.batch_size must be positive".into());
        }
        if self.shots == 0 {
            p.push("train.shots must be positive".into());
        }
        if self.prompt_length == 0 {
            p.push("train.prompt_length must be positive".into());
        }
        p
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Language,
    Vision,
    Joint,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Language => "language",
            Phase::Vision => "vision",
            Phase::Joint => "joint",
        }
    }

    fn trains(self, side: Side) -> bool {
        match self {
            Phase::Language => side == Side::Language,
            Phase::Vision => side == Side::Vision,
            Phase::Joint => true,
        }
    }
}

/// One optimisation step as written to the JSON-lines log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: u8,
    pub phase: Phase,
    pub step: u64,
    pub epoch: usize,
    pub ce: f64,
    /// Absent in stage 2.
    pub kl: Option<f64>,
    pub lambda: f64,
    /// `ce + lambda * kl`, evaluated in f64 from the logged parts.
    pub total: f64,
    /// The f32 objective the gradient was taken of.
    pub objective: f64,
}

/// Prompt checksums at a phase boundary.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseMark {
    pub stage: u8,
    pub phase: Phase,
    pub steps: u64,
    pub language: String,
    pub vision: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub stage: u8,
    pub phase: Option<Phase>,
    pub step: u64,
    pub history: Vec<StepRecord>,
    pub marks: Vec<PhaseMark>,
    /// Checkpoint file names written so far.
    pub checkpoints: Vec<String>,
}

impl RunState {
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.history {
            s.push_str(&serde_json::to_string(r).expect("record serializes"));
            s.push('\n');
        }
        s
    }

    fn mark(&mut self, stage: u8, phase: Phase, pack: &PromptPack) {
        self.marks.push(PhaseMark {
            stage,
            phase,
            steps: self.step,
            language: pack.checksum(Side::Language),
            vision: pack.checksum(Side::Vision),
        });
    }
}

/// `[C × d_joint]` text features for every class, with `prompts` injected
/// (an empty slice gives the zero-shot features).
pub fn class_text_features(
    text: &TextTower,
    cfg: &ModelConfig,
    classes: &ClassPromptSet,
    prompts: &[Tensor],
) -> Result<Tensor> {
    let mut g = Graph::new();
    let bound = text.bind(&mut g);
    let pv: Vec<Var> = prompts.iter().map(|t| g.leaf(t)).collect();
    let rows = classes
        .queries
        .iter()
        .map(|q| text_forward(&mut g, cfg, &bound, q, &pv))
        .collect::<Result<Vec<_>>>()?;
    let z = g.concat(&rows, 0)?;
    Ok(g.tensor(z))
}

const FEATURE_CHUNK: usize = 16;

/// `[N × d_joint]` image features, with `prompts` injected.
pub fn image_features(
    vision: &VisionTower,
    cfg: &ModelConfig,
    images: &[&ImageGrid],
    prompts: &[Tensor],
) -> Result<Tensor> {
    let mut data = Vec::with_capacity(images.len() * cfg.d_joint);
    for chunk in images.chunks(FEATURE_CHUNK) {
        let mut g = Graph::new();
        let bound = vision.bind(&mut g);
        let pv: Vec<Var> = prompts.iter().map(|t| g.leaf(t)).collect();
        for img in chunk {
            let f = vision_forward(&mut g, cfg, &bound, img, &pv)?;
            data.extend_from_slice(g.value(f));
        }
    }
    Tensor::new(vec![images.len().max(1), cfg.d_joint], data)
}

fn image_key(img: &ImageGrid) -> String {
    let mut h = Sha256::new();
    for d in [img.height(), img.width(), img.channels()] {
        h.update((d as u64).to_le_bytes());
    }
    for v in img.data() {
        h.update(v.to_le_bytes());
    }
    hex(&h.finalize())
}

/// Zero-shot predictions of the frozen backbone with hand-crafted prompts,
/// cached by image content.
pub struct ZeroShotTeacher<'a> {
    weights: &'a EncoderWeights,
    cfg: &'a ModelConfig,
    text_features: Tensor,
    cache: HashMap<String, Prediction>,
}

impl<'a> ZeroShotTeacher<'a> {
    pub fn new(weights: &'a EncoderWeights, cfg: &'a ModelConfig, classes: &ClassPromptSet) -> Result<Self> {
        Ok(Self {
            weights,
            cfg,
            text_features: class_text_features(&weights.text, cfg, classes, &[])?,
            cache: HashMap::new(),
        })
    }

    pub fn predict_uncached(&self, img: &ImageGrid) -> Result<Prediction> {
        let f = image_features(&self.weights.vision, self.cfg, &[img], &[])?;
        let f = f.reshape(vec![self.cfg.d_joint])?;
        let logits = similarity(&self.text_features, &f, Provenance::ZeroShot)?;
        predict(&logits, f64::from(self.cfg.temperature))
    }

    pub fn predict(&mut self, img: &ImageGrid) -> Result<Prediction> {
        let key = image_key(img);
        if let Some(p) = self.cache.get(&key) {
            return Ok(p.clone());
        }
        let p = self.predict_uncached(img)?;
        self.cache.insert(key, p.clone());
        Ok(p)
    }

    pub fn cached(&self) -> usize {
        self.cache.len()
    }
}

pub fn zero_shot_predict(
    weights: &EncoderWeights,
    cfg: &ModelConfig,
    classes: &ClassPromptSet,
    img: &ImageGrid,
) -> Result<Prediction> {
    ZeroShotTeacher::new(weights, cfg, classes)?.predict_uncached(img)
}

/// Training inputs prepared once: fused student images, local labels and
/// teacher predictions.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub classes: ClassPromptSet,
    pub student_images: Vec<ImageGrid>,
    pub labels: Vec<usize>,
    pub teacher: Vec<Prediction>,
}

impl TrainData {
    pub fn prepare(
        weights: &EncoderWeights,
        cfg: &ModelConfig,
        adapter: &AdapterConfig,
        vocab: &Vocabulary,
        dataset: &Dataset,
        tcfg: &TrainConfig,
    ) -> Result<Self> {
        let base = &dataset.spec.base;
        let names: Vec<String> = base.iter().map(|&c| dataset.spec.classes[c].name.clone()).collect();
        let classes = ClassPromptSet::new(vocab, &names, cfg.max_text_len);
        let mut teacher_model = ZeroShotTeacher::new(weights, cfg, &classes)?;
        let (mut student_images, mut labels, mut teacher) = (Vec::new(), Vec::new(), Vec::new());
        for s in dataset.train.iter().filter(|s| s.index < tcfg.shots) {
            let local = base.iter().position(|&c| c == s.label).expect("train samples are base classes");
            let fused = adapt(&s.image, adapter)?;
            let p = match tcfg.teacher_input {
                TeacherInput::RawImage => teacher_model.predict(&s.image)?,
                TeacherInput::FusedImage => teacher_model.predict(&fused)?,
            };
            student_images.push(fused);
            labels.push(local);
            teacher.push(p);
        }
        if labels.is_empty() {
            return Err(Error::Usage("no training samples".into()));
        }
        Ok(Self {
            classes,
            student_images,
            labels,
            teacher,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Where a side's features come from inside a batch graph.
#[derive(Clone, Copy, Debug)]
pub enum FeatureSource<'a> {
    /// Computed on the graph from these bound prompt tokens (may be empty).
    Live(&'a [Var]),
    /// Precomputed rows; for images, one row per training sample.
    Fixed(&'a Tensor),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Objective {
    Stage1 { lambda: f32, direction: KlDirection },
    Stage2,
}

/// Loss of one mini-batch.
pub fn batch_loss<T: Real>(
    g: &mut Graph<T>,
    weights: &EncoderWeights,
    cfg: &ModelConfig,
    data: &TrainData,
    batch: &[usize],
    text: FeatureSource,
    image: FeatureSource,
    objective: Objective,
) -> Result<LossParts> {
    let z = match text {
        FeatureSource::Live(pv) => {
            let bound = weights.text.bind(g);
            let rows = data
                .classes
                .queries
                .iter()
                .map(|q| text_forward(g, cfg, &bound, q, pv))
                .collect::<Result<Vec<_>>>()?;
            g.concat(&rows, 0)?
        }
        FeatureSource::Fixed(t) => g.leaf(t),
    };
    let f = match image {
        FeatureSource::Live(pv) => {
            let bound = weights.vision.bind(g);
            let rows = batch
                .iter()
                .map(|&i| vision_forward(g, cfg, &bound, &data.student_images[i], pv))
                .collect::<Result<Vec<_>>>()?;
            g.concat(&rows, 0)?
        }
        FeatureSource::Fixed(t) => {
            let rows: Vec<f32> = batch.iter().flat_map(|&i| t.row(i).iter().copied()).collect();
            g.constant(vec![batch.len(), t.cols()], rows)?
        }
    };
    let logits = graph_logits(g, z, f)?;
    let lp = graph_log_probs(g, logits, cfg.temperature)?;
    let labels: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();
    match objective {
        Objective::Stage1 { lambda, direction } => {
            let teacher: Vec<Prediction> = batch.iter().map(|&i| data.teacher[i].clone()).collect();
            graph_stage1_loss(g, lp, &labels, &teacher, lambda, direction)
        }
        Objective::Stage2 => graph_stage2_loss(g, lp, &labels),
    }
}

fn epoch_order(seed: u64, stage: u8, phase: Phase, epoch: usize, n: usize) -> Vec<usize> {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update([stage]);
    h.update(phase.name().as_bytes());
    h.update((epoch as u64).to_le_bytes());
    let mut key = [0u8; 32];
    key.copy_from_slice(&h.finalize());
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::from_seed(key));
    order
}

fn divergence(state: &RunState, stage: u8, phase: Phase, epoch: usize, what: &str, pack: &PromptPack) -> Error {
    let norms: Vec<String> = pack
        .named_tensors()
        .iter()
        .map(|(n, t)| {
            let s: f64 = t.data().iter().map(|&v| f64::from(v) * f64::from(v)).sum();
            format!("{n}={:.6e}", s.sqrt())
        })
        .collect();
    let last = state.history.last().map(|r| format!("{r:?}")).unwrap_or_else(|| "none".into());
    Error::Divergence(format!(
        "{what} at stage {stage} phase {} epoch {epoch} step {}; prompt norms [{}]; last record {last}",
        phase.name(),
        state.step,
        norms.join(", ")
    ))
}

/// Everything a phase needs besides the pack itself.
pub struct PhaseRun<'a> {
    pub weights: &'a EncoderWeights,
    pub cfg: &'a ModelConfig,
    pub data: &'a TrainData,
    pub tcfg: &'a TrainConfig,
}

impl PhaseRun<'_> {
    /// Runs `epochs` epochs of `phase`. Sides not trained in this phase use
    /// their tokens from `context` (or are not injected when the mode leaves
    /// them out); only the pack's trained sides are updated.
    pub fn run(
        &self,
        stage: u8,
        phase: Phase,
        epochs: usize,
        objective: Objective,
        pack: &mut PromptPack,
        context: &PromptPack,
        state: &mut RunState,
    ) -> Result<()> {
        let mode = self.tcfg.mode;
        let trains = |side| phase.trains(side) && mode.uses(side);
        let lang_live = trains(Side::Language);
        let vis_live = trains(Side::Vision);
        pack.set_trainable(Side::Language, lang_live);
        pack.set_trainable(Side::Vision, vis_live);
        state.stage = stage;
        state.phase = Some(phase);

        let empty: Vec<Tensor> = Vec::new();
        let fixed_tokens = |side| if mode.uses(side) { context.side(side) } else { &empty[..] };
        let text_fixed = if lang_live {
            None
        } else {
            Some(class_text_features(
                &self.weights.text,
                self.cfg,
                &self.data.classes,
                fixed_tokens(Side::Language),
            )?)
        };
        let image_fixed = if vis_live {
            None
        } else {
            let imgs: Vec<&ImageGrid> = self.data.student_images.iter().collect();
            Some(image_features(&self.weights.vision, self.cfg, &imgs, fixed_tokens(Side::Vision))?)
        };

        let lr = self.tcfg.learning_rate as f32;
        let lambda = match objective {
            Objective::Stage1 { lambda, .. } => f64::from(lambda),
            Objective::Stage2 => 0.0,
        };
        for epoch in 0..epochs {
            let order = epoch_order(self.tcfg.seed, stage, phase, epoch, self.data.len());
            for batch in order.chunks(self.tcfg.batch_size) {
                let mut g = Graph::new();
                let lv: Vec<Var> = if lang_live { pack.bind(&mut g, Side::Language) } else { Vec::new() };
                let vv: Vec<Var> = if vis_live { pack.bind(&mut g, Side::Vision) } else { Vec::new() };
                let text = match &text_fixed {
                    Some(t) => FeatureSource::Fixed(t),
                    None => FeatureSource::Live(&lv),
                };
                let image = match &image_fixed {
                    Some(t) => FeatureSource::Fixed(t),
                    None => FeatureSource::Live(&vv),
                };
                // Numeric failures mid-training mean the prompts have blown up.
                let as_divergence = |e: Error, state: &RunState, pack: &PromptPack| match e {
                    Error::Numeric(msg) => divergence(state, stage, phase, epoch, &msg, pack),
                    other => other,
                };
                let parts = batch_loss(&mut g, self.weights, self.cfg, self.data, batch, text, image, objective)
                    .map_err(|e| as_divergence(e, state, pack))?;
                let ce = f64::from(g.scalar(parts.ce));
                let kl = parts.kl.map(|k| f64::from(g.scalar(k)));
                let objective_value = f64::from(g.scalar(parts.total));
                if !(ce.is_finite() && kl.is_none_or(f64::is_finite) && objective_value.is_finite()) {
                    return Err(divergence(state, stage, phase, epoch, "non-finite loss", pack));
                }
                let grads = g.backward(parts.total).map_err(|e| as_divergence(e, state, pack))?;
                for (v, t) in lv.iter().zip(pack.side_mut(Side::Language)) {
                    grads.write_to(*v, t);
                    t.sgd_step(lr);
                }
                for (v, t) in vv.iter().zip(pack.side_mut(Side::Vision)) {
                    grads.write_to(*v, t);
                    t.sgd_step(lr);
                }
                state.step += 1;
                let total = match kl {
                    Some(k) if lambda != 0.0 => ce + lambda * k,
                    _ => ce,
                };
                state.history.push(StepRecord {
                    stage,
                    phase,
                    step: state.step,
                    epoch,
                    ce,
                    kl,
                    lambda,
                    total,
                    objective: objective_value,
                });
                if !pack.is_finite() {
                    return Err(divergence(state, stage, phase, epoch, "non-finite prompt", pack));
                }
            }
        }
        pack.set_trainable(Side::Language, mode.uses(Side::Language));
        pack.set_trainable(Side::Vision, mode.uses(Side::Vision));
        state.mark(stage, phase, pack);
        Ok(())
    }
}

fn check_data(data: &TrainData, pack: &PromptPack) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Usage("training data is empty".into()));
    }
    if pack.prompt_length() == 0 {
        return Err(Error::Usage("prompts are not initialised".into()));
    }
    Ok(())
}

/// Stage 1: the language phase (CE + λ_d·KL) and the vision phase
/// (CE + λ_g·KL) in the configured order, each training only its own side.
/// A mode that leaves a side out skips that side's phase.
pub fn train_stage1(
    weights: &EncoderWeights,
    cfg: &ModelConfig,
    prompts: PromptPack,
    data: &TrainData,
    tcfg: &TrainConfig,
    mut state: RunState,
) -> Result<(PromptPack, RunState)> {
    check_data(data, &prompts)?;
    let run = PhaseRun { weights, cfg, data, tcfg };
    let initial = prompts.clone();
    let mut pack = prompts;
    let phases = match tcfg.order {
        Order::LanguageFirst => [Phase::Language, Phase::Vision],
        Order::VisionFirst => [Phase::Vision, Phase::Language],
    };
    for (i, phase) in phases.into_iter().enumerate() {
        let (side, epochs, lambda) = match phase {
            Phase::Language => (Side::Language, tcfg.epochs_stage1_lang, tcfg.lambda_d),
            _ => (Side::Vision, tcfg.epochs_stage1_vis, tcfg.lambda_g),
        };
        if !tcfg.mode.uses(side) {
            continue;
        }
        let context = if i == 1 && tcfg.second_phase_init == SecondPhaseInit::FromScratch {
            initial.clone()
        } else {
            pack.clone()
        };
        let objective = Objective::Stage1 {
            lambda: lambda as f32,
            direction: tcfg.kl_direction,
        };
        run.run(1, phase, epochs, objective, &mut pack, &context, &mut state)?;
    }
    Ok((pack, state))
}

/// Stage 2: every side the mode uses trains jointly on cross-entropy.
pub fn train_stage2(
    weights: &EncoderWeights,
    cfg: &ModelConfig,
    prompts: PromptPack,
    data: &TrainData,
    tcfg: &TrainConfig,
    mut state: RunState,
) -> Result<(PromptPack, RunState)> {
    check_data(data, &prompts)?;
    let run = PhaseRun { weights, cfg, data, tcfg };
    let mut pack = prompts;
    let context = pack.clone();
    run.run(2, Phase::Joint, tcfg.epochs_stage2, Objective::Stage2, &mut pack, &context, &mut state)?;
    Ok((pack, state))
}

/// The prompts a trained run actually injects: sides the mode leaves out are
/// dropped.
pub fn effective_prompts(pack: &PromptPack, mode: Mode) -> PromptPack {
    match mode {
        Mode::Both => pack.clone(),
        Mode::LanguageOnly => pack.without(Side::Vision),
        Mode::VisionOnly => pack.without(Side::Language),
    }
}

/// Mean KL(p_zs ‖ p) over the training data under `pack`.
pub fn mean_teacher_kl(weights: &EncoderWeights, cfg: &ModelConfig, data: &TrainData, pack: &PromptPack, mode: Mode) -> Result<f64> {
    let eff = effective_prompts(pack, mode);
    let z = class_text_features(&weights.text, cfg, &data.classes, eff.side(Side::Language))?;
    let imgs: Vec<&ImageGrid> = data.student_images.iter().collect();
    let f = image_features(&weights.vision, cfg, &imgs, eff.side(Side::Vision))?;
    let mut total = 0.0;
    for i in 0..data.len() {
        let fi = Tensor::new(vec![cfg.d_joint], f.row(i).to_vec())?;
        let p = predict(&similarity(&z, &fi, Provenance::Prompted)?, f64::from(cfg.temperature))?;
        total += crate::clip_head::kl_loss(&p, &data.teacher[i])?;
    }
    Ok(total / data.len() as f64)
}

/// Mean training cross-entropy under `pack`.
pub fn mean_train_ce(weights: &EncoderWeights, cfg: &ModelConfig, data: &TrainData, pack: &PromptPack, mode: Mode) -> Result<f64> {
    let eff = effective_prompts(pack, mode);
    let z = class_text_features(&weights.text, cfg, &data.classes, eff.side(Side::Language))?;
    let imgs: Vec<&ImageGrid> = data.student_images.iter().collect();
    let f = image_features(&weights.vision, cfg, &imgs, eff.side(Side::Vision))?;
    let mut total = 0.0;
    for i in 0..data.len() {
        let fi = Tensor::new(vec![cfg.d_joint], f.row(i).to_vec())?;
        let p = predict(&similarity(&z, &fi, Provenance::Prompted)?, f64::from(cfg.temperature))?;
        total += crate::clip_head::ce_loss(&p, data.labels[i])?;
    }
    Ok(total / data.len() as f64)
}
