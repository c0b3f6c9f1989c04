use super::report::{
    Aggregate, BackboneAudit, Baseline, EvalReport, PromptAudit, RepeatSummary, RunSummary, SideAudit, SideStatus,
    SweepRow, SweepTable, REPORT_SCHEMA,
};
use super::{evaluate, generate_dataset, harmonic_mean_or_zero, population_stats, Dataset, DatasetSpec, Split};
use crate::encoders::{init_prompts, ClassPromptSet, EncoderWeights, ModelConfig, PromptPack, Side, Vocabulary};
use crate::error::{Error, Result};
use crate::image_adapter::{AdapterConfig, ImageGrid};
use crate::tensor::hex;
use crate::trainer::{
    effective_prompts, train_stage1, train_stage2, warm_backbone, Mode, RunState, TrainConfig, TrainData,
    WarmupConfig,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::HashMap;
use std::rc::Rc;
use std::time::Instant;

/// One experiment, as read from a JSON config file. Missing sections take
/// their defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub adapter: AdapterConfig,
    pub train: TrainConfig,
    pub warmup: WarmupConfig,
    pub dataset: DatasetSpec,
    /// Runs averaged by `run_repeats`, with consecutive training seeds.
    pub repeats: usize,
    /// Where run artifacts go; not part of the fingerprint.
    pub output_dir: Option<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::desk(),
            adapter: AdapterConfig::default(),
            train: TrainConfig::default(),
            warmup: WarmupConfig::default(),
            dataset: DatasetSpec::default(),
            repeats: 1,
            output_dir: None,
        }
    }
}

fn sha_json<T: Serialize>(v: &T) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(v).expect("config serializes"));
    hex(&h.finalize())
}

impl ExperimentConfig {
    /// Every problem with the configuration, each naming its field.
    pub fn problems(&self) -> Vec<String> {
        let mut p = self.model.problems();
        p.extend(self.adapter.problems());
        p.extend(self.train.problems());
        p.extend(self.warmup.problems());
        p.extend(self.dataset.problems());
        if self.repeats == 0 {
            p.push("repeats must be positive".into());
        }
        if self.model.image_side() != self.dataset.image_side {
            p.push(format!(
                "dataset.image_side ({}) must equal model.patch_grid * model.patch_size ({})",
                self.dataset.image_side,
                self.model.image_side()
            ));
        }
        if self.model.channels != self.dataset.channels {
            p.push(format!(
                "dataset.channels ({}) must equal model.channels ({})",
                self.dataset.channels, self.model.channels
            ));
        }
        if self.train.shots > self.dataset.shots {
            p.push(format!(
                "train.shots ({}) exceeds dataset.shots ({})",
                self.train.shots, self.dataset.shots
            ));
        }
        let side = self.dataset.image_side;
        if side > 0 && !side.is_power_of_two() {
            p.push(format!("dataset.image_side ({side}) must be a power of two for the adapter FFT"));
        }
        let vocab = Vocabulary::new(self.dataset.classes.iter().map(|c| c.name.as_str()));
        if vocab.len() > self.model.vocab_size {
            p.push(format!(
                "model.vocab_size ({}) is smaller than the vocabulary ({})",
                self.model.vocab_size,
                vocab.len()
            ));
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

    /// SHA-256 of the canonical JSON of everything except `output_dir`.
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        sha_json(&c)
    }

    /// Reads a JSON config; missing fields take their defaults.
    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Sets fields by dotted path, e.g. `("train.lambda_d", "0.8")`. Values
    /// are read as JSON, falling back to a plain string.
    pub fn with_overrides(&self, overrides: &[(String, String)]) -> Result<Self> {
        let mut root = serde_json::to_value(self)?;
        for (path, raw) in overrides {
            let mut node = &mut root;
            for key in path.split('.') {
                node = node
                    .as_object_mut()
                    .and_then(|m| m.get_mut(key))
                    .ok_or_else(|| Error::Config(format!("unknown config field {path:?}")))?;
            }
            *node = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.clone()));
        }
        serde_json::from_value(root).map_err(|e| Error::Config(format!("override: {e}")))
    }

    /// Fingerprint of the parts that determine the warmed backbone.
    pub fn backbone_fingerprint(&self) -> String {
        sha_json(&(&self.model, &self.warmup, &self.dataset))
    }
}

/// The frozen backbone and data shared by every run with the same model,
/// warmup and dataset settings.
#[derive(Debug)]
pub struct Prepared {
    pub dataset: Dataset,
    pub vocab: Vocabulary,
    pub random_weights: EncoderWeights,
    pub weights: EncoderWeights,
    pub fingerprint: String,
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate()?;
    let dataset = generate_dataset(&cfg.dataset)?;
    let vocab = Vocabulary::new(cfg.dataset.classes.iter().map(|c| c.name.as_str()));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.warmup.weights_seed);
    let random_weights = EncoderWeights::init(&cfg.model, &mut rng)?;
    let base = &dataset.spec.base;
    let names: Vec<String> = base.iter().map(|&c| dataset.spec.classes[c].name.clone()).collect();
    let classes = ClassPromptSet::new(&vocab, &names, cfg.model.max_text_len);
    let images: Vec<&ImageGrid> = dataset.train.iter().map(|s| &s.image).collect();
    let labels: Vec<usize> = dataset
        .train
        .iter()
        .map(|s| base.iter().position(|&c| c == s.label).expect("base sample"))
        .collect();
    let weights = warm_backbone(&random_weights, &cfg.model, &classes, &images, &labels, &cfg.warmup)?;
    Ok(Prepared {
        dataset,
        vocab,
        random_weights,
        weights,
        fingerprint: cfg.backbone_fingerprint(),
    })
}

/// Reuses prepared backbones across runs that share them.
#[derive(Debug, Default)]
pub struct PreparedCache {
    entries: HashMap<String, Rc<Prepared>>,
}

impl PreparedCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&mut self, cfg: &ExperimentConfig) -> Result<Rc<Prepared>> {
        let key = cfg.backbone_fingerprint();
        if let Some(p) = self.entries.get(&key) {
            return Ok(Rc::clone(p));
        }
        let p = Rc::new(prepare(cfg)?);
        self.entries.insert(key, Rc::clone(&p));
        Ok(p)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Everything a run produces. `runtime_seconds` is kept out of the report so
/// that the report itself is reproducible bit for bit.
#[derive(Debug)]
pub struct RunOutput {
    pub config: ExperimentConfig,
    pub report: EvalReport,
    pub prepared: Rc<Prepared>,
    pub initial_prompts: PromptPack,
    pub stage1_prompts: PromptPack,
    pub final_prompts: PromptPack,
    pub state: RunState,
    pub runtime_seconds: f64,
}

fn side_audit(mode: Mode, side: Side, initial: &PromptPack, fin: &PromptPack) -> SideAudit {
    let (a, b) = (initial.checksum(side), fin.checksum(side));
    SideAudit {
        status: if mode.uses(side) { SideStatus::Trained } else { SideStatus::Untouched },
        unchanged: a == b,
        initial_checksum: a,
        final_checksum: b,
    }
}

/// Backbone, teacher cache, stage 1, stage 2, evaluation.
pub fn run_pipeline(cfg: &ExperimentConfig, cache: &mut PreparedCache) -> Result<RunOutput> {
    let start = Instant::now();
    cfg.validate()?;
    let prepared = cache.get(cfg)?;
    let (w, model) = (&prepared.weights, &cfg.model);
    let backbone_before = w.checksum();

    let data = TrainData::prepare(w, model, &cfg.adapter, &prepared.vocab, &prepared.dataset, &cfg.train)?;
    let initial = init_prompts(
        model,
        cfg.train.prompt_length,
        cfg.train.seed,
        cfg.train.init_mode,
        &w.text,
        &prepared.vocab,
    )?;
    let (stage1, state) = train_stage1(w, model, initial.clone(), &data, &cfg.train, RunState::default())?;
    let (fin, state) = train_stage2(w, model, stage1.clone(), &data, &cfg.train, state)?;

    let eff = effective_prompts(&fin, cfg.train.mode);
    let ds = &prepared.dataset;
    let base = evaluate(w, model, Some(&eff), Some(&cfg.adapter), ds, Split::Base, &prepared.vocab)?;
    let novel = evaluate(w, model, Some(&eff), Some(&cfg.adapter), ds, Split::Novel, &prepared.vocab)?;
    let zs_base = evaluate(w, model, None, None, ds, Split::Base, &prepared.vocab)?;
    let zs_novel = evaluate(w, model, None, None, ds, Split::Novel, &prepared.vocab)?;

    let backbone_after = w.checksum();
    let report = EvalReport {
        schema_version: REPORT_SCHEMA,
        config_fingerprint: cfg.fingerprint(),
        dataset_fingerprint: ds.fingerprint.clone(),
        mode: cfg.train.mode,
        base_accuracy: base.accuracy,
        novel_accuracy: novel.accuracy,
        harmonic_mean: harmonic_mean_or_zero(base.accuracy, novel.accuracy)?,
        zero_shot: Baseline {
            base_accuracy: zs_base.accuracy,
            novel_accuracy: zs_novel.accuracy,
            harmonic_mean: harmonic_mean_or_zero(zs_base.accuracy, zs_novel.accuracy)?,
        },
        base,
        novel,
        prompts: PromptAudit {
            prompt_length: fin.prompt_length(),
            language: side_audit(cfg.train.mode, Side::Language, &initial, &fin),
            vision: side_audit(cfg.train.mode, Side::Vision, &initial, &fin),
        },
        backbone: BackboneAudit {
            unchanged: backbone_before == backbone_after,
            checksum_before: backbone_before,
            checksum_after: backbone_after,
        },
        steps: state.step,
        phases: state.marks.clone(),
        final_train_ce: state.history.last().map(|r| r.ce),
        std_convention: "population".into(),
        sweep: None,
        repeats: None,
    };
    Ok(RunOutput {
        config: cfg.clone(),
        report,
        prepared,
        initial_prompts: initial,
        stage1_prompts: stage1,
        final_prompts: fin,
        state,
        runtime_seconds: start.elapsed().as_secs_f64(),
    })
}

/// `cfg.repeats` runs with training seeds `seed, seed+1, …`. The first run's
/// report carries the per-run summaries and their means.
pub fn run_repeats(cfg: &ExperimentConfig, cache: &mut PreparedCache) -> Result<RunOutput> {
    let mut first: Option<RunOutput> = None;
    let mut runs = Vec::new();
    for i in 0..cfg.repeats {
        let mut c = cfg.clone();
        c.train.seed = cfg.train.seed.wrapping_add(i as u64);
        let out = run_pipeline(&c, cache)?;
        runs.push(RunSummary {
            seed: c.train.seed,
            base_accuracy: out.report.base_accuracy,
            novel_accuracy: out.report.novel_accuracy,
            harmonic_mean: out.report.harmonic_mean,
        });
        if first.is_none() {
            first = Some(out);
        }
    }
    let mut out = first.ok_or_else(|| Error::Usage("repeats must be positive".into()))?;
    out.config = cfg.clone();
    out.report.config_fingerprint = cfg.fingerprint();
    if runs.len() > 1 {
        let col = |f: fn(&RunSummary) -> f64| runs.iter().map(f).collect::<Vec<_>>();
        out.report.repeats = Some(RepeatSummary {
            mean_base: population_stats(&col(|r| r.base_accuracy))?.mean,
            mean_novel: population_stats(&col(|r| r.novel_accuracy))?.mean,
            mean_hm: population_stats(&col(|r| r.harmonic_mean))?.mean,
            runs,
        });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    PromptLength,
    Sigma,
    LambdaD,
    LambdaG,
    AdaptationOnOff,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::PromptLength => "prompt_length",
            SweepAxis::Sigma => "sigma",
            SweepAxis::LambdaD => "lambda_d",
            SweepAxis::LambdaG => "lambda_g",
            SweepAxis::AdaptationOnOff => "adaptation_on_off",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "prompt_length" => SweepAxis::PromptLength,
            "sigma" => SweepAxis::Sigma,
            "lambda_d" => SweepAxis::LambdaD,
            "lambda_g" => SweepAxis::LambdaG,
            "adaptation_on_off" => SweepAxis::AdaptationOnOff,
            other => return Err(Error::Usage(format!("unknown sweep axis {other:?}"))),
        })
    }
}

/// `base` with one axis set to `value`. For `adaptation_on_off`, 0 turns
/// stage 2 off and 1 keeps the base config's stage-2 epochs.
pub fn apply_axis(base: &ExperimentConfig, axis: SweepAxis, value: f64) -> Result<ExperimentConfig> {
    let mut c = base.clone();
    match axis {
        SweepAxis::PromptLength => {
            if value < 1.0 || value.fract() != 0.0 {
                return Err(Error::Usage(format!("prompt length must be a positive integer, got {value}")));
            }
            c.train.prompt_length = value as usize;
        }
        SweepAxis::Sigma => c.adapter.sigma = value,
        SweepAxis::LambdaD => c.train.lambda_d = value,
        SweepAxis::LambdaG => c.train.lambda_g = value,
        SweepAxis::AdaptationOnOff => {
            if value == 0.0 {
                c.train.epochs_stage2 = 0;
            } else if value == 1.0 {
                if base.train.epochs_stage2 == 0 {
                    return Err(Error::Usage("adaptation sweep needs a base config with stage-2 epochs".into()));
                }
            } else {
                return Err(Error::Usage(format!("adaptation_on_off takes 0 or 1, got {value}")));
            }
        }
    }
    c.validate()?;
    Ok(c)
}

/// Sweep results; `error` is set if a point failed, with the rows before it kept.
#[derive(Debug)]
pub struct SweepOutcome {
    pub table: SweepTable,
    pub runs: Vec<RunOutput>,
    pub error: Option<Error>,
}

impl SweepOutcome {
    /// The first point's report carrying the sweep table.
    pub fn report(&self) -> Option<EvalReport> {
        self.runs.first().map(|r| {
            let mut rep = r.report.clone();
            rep.sweep = Some(self.table.clone());
            rep
        })
    }
}

/// One full pipeline run per value, then the aggregate row.
pub fn sweep(axis: SweepAxis, values: &[f64], base: &ExperimentConfig, cache: &mut PreparedCache) -> Result<SweepOutcome> {
    if values.len() < 2 {
        return Err(Error::Usage(format!("a sweep needs at least 2 values, got {}", values.len())));
    }
    base.validate()?;
    let mut table = SweepTable {
        axis,
        rows: Vec::new(),
        aggregate: None,
    };
    let mut runs = Vec::new();
    let mut error = None;
    for &v in values {
        let result = apply_axis(base, axis, v).and_then(|c| run_repeats(&c, cache));
        match result {
            Ok(out) => {
                let r = &out.report;
                let (b, n, hm) = match &r.repeats {
                    Some(s) => (s.mean_base, s.mean_novel, s.mean_hm),
                    None => (r.base_accuracy, r.novel_accuracy, r.harmonic_mean),
                };
                table.rows.push(SweepRow {
                    value: v,
                    base: b,
                    novel: n,
                    hm,
                    zero_shot_base: r.zero_shot.base_accuracy,
                    zero_shot_novel: r.zero_shot.novel_accuracy,
                    config_fingerprint: r.config_fingerprint.clone(),
                    dataset_fingerprint: r.dataset_fingerprint.clone(),
                });
                runs.push(out);
            }
            Err(e) => {
                error = Some(e);
                break;
            }
        }
    }
    if !table.rows.is_empty() {
        table.aggregate = Some(Aggregate::of_rows(&table.rows)?);
    }
    Ok(SweepOutcome { table, runs, error })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(pairs: &[(&str, &str)]) -> Result<ExperimentConfig> {
        let v: Vec<(String, String)> = pairs.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect();
        ExperimentConfig::default().with_overrides(&v)
    }

    #[test]
    fn dotted_overrides() {
        let c = set(&[("train.lambda_d", "0.8"), ("train.mode", "vision_only"), ("output_dir", "runs/a")]).unwrap();
        assert_eq!(c.train.lambda_d, 0.8);
        assert_eq!(c.train.mode, Mode::VisionOnly);
        assert_eq!(c.output_dir.as_deref(), Some("runs/a"));
        assert_eq!(c.fingerprint(), set(&[("train.lambda_d", "0.8"), ("train.mode", "vision_only")]).unwrap().fingerprint());
    }

    #[test]
    fn bad_overrides_are_config_errors() {
        for pairs in [[("train.lamda_d", "0.8")], [("train.lambda_d", "high")], [("train", "3")]] {
            assert!(matches!(set(&pairs), Err(Error::Config(_))), "{pairs:?}");
        }
    }

    #[test]
    fn axis_values() {
        let base = ExperimentConfig::default();
        assert_eq!(apply_axis(&base, SweepAxis::PromptLength, 4.0).unwrap().train.prompt_length, 4);
        assert!(apply_axis(&base, SweepAxis::PromptLength, 0.0).is_err());
        assert_eq!(apply_axis(&base, SweepAxis::AdaptationOnOff, 0.0).unwrap().train.epochs_stage2, 0);
        assert!(apply_axis(&base, SweepAxis::AdaptationOnOff, 0.5).is_err());
        for axis in ["prompt_length", "sigma", "lambda_d", "lambda_g", "adaptation_on_off"] {
            assert_eq!(SweepAxis::parse(axis).unwrap().name(), axis);
        }
    }
}
