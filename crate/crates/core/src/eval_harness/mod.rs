//! Base-to-novel evaluation, metric arithmetic, sweeps and report files.

mod dataset;
mod pipeline;
mod report;

pub use dataset::{
    generate_dataset, nearest_centroid_accuracy, render, ClassRecipe, Dataset, DatasetSpec, Sample, ShapeKind, Split,
};
pub use pipeline::{
    apply_axis, prepare, run_pipeline, run_repeats, sweep, ExperimentConfig, Prepared, PreparedCache, RunOutput,
    SweepAxis, SweepOutcome,
};
pub use report::{
    emit_report, read_report, sig6, write_run, Aggregate, Baseline, BackboneAudit, EvalReport, PromptAudit,
    RepeatSummary, RunSummary, SideAudit, SideStatus, SweepRow, SweepTable, REPORT_SCHEMA,
};

use crate::clip_head::{predict, similarity, Provenance};
use crate::encoders::{ClassPromptSet, EncoderWeights, ModelConfig, PromptPack, Side, Vocabulary};
use crate::error::{Error, Result};
use crate::image_adapter::{adapt, AdapterConfig, ImageGrid};
use crate::tensor::Tensor;
use crate::trainer::{class_text_features, image_features};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub class: String,
    pub correct: usize,
    pub total: usize,
    /// Percent.
    pub accuracy: f64,
}

/// One held-out image's outcome; classes are global indices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImagePrediction {
    pub label: usize,
    pub index: usize,
    pub predicted: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitResult {
    pub split: Split,
    pub classes: Vec<String>,
    pub per_class: Vec<ClassAccuracy>,
    pub correct: usize,
    pub total: usize,
    /// Percent.
    pub accuracy: f64,
    pub predictions: Vec<ImagePrediction>,
}

/// Top-1 accuracy over the split's held-out images, choosing only among the
/// split's own classes. Text features use the given prompts, so novel class
/// names are classified with prompts learned on base classes.
pub fn evaluate(
    weights: &EncoderWeights,
    cfg: &ModelConfig,
    prompts: Option<&PromptPack>,
    adapter: Option<&AdapterConfig>,
    dataset: &Dataset,
    split: Split,
    vocab: &Vocabulary,
) -> Result<SplitResult> {
    let class_ids = dataset.spec.split_classes(split);
    let samples = dataset.eval_split(split);
    if samples.is_empty() || class_ids.is_empty() {
        return Err(Error::Usage(format!("split {split:?} has no images")));
    }
    let names: Vec<String> = class_ids.iter().map(|&c| dataset.spec.classes[c].name.clone()).collect();
    let classes = ClassPromptSet::new(vocab, &names, cfg.max_text_len);
    let empty = Vec::new();
    let lang = prompts.map_or(&empty[..], |p| p.side(Side::Language));
    let vis = prompts.map_or(&empty[..], |p| p.side(Side::Vision));
    let z = class_text_features(&weights.text, cfg, &classes, lang)?;

    let inputs: Vec<ImageGrid> = match adapter {
        Some(a) => samples.iter().map(|s| adapt(&s.image, a)).collect::<Result<_>>()?,
        None => samples.iter().map(|s| s.image.clone()).collect(),
    };
    let refs: Vec<&ImageGrid> = inputs.iter().collect();
    let f = image_features(&weights.vision, cfg, &refs, vis)?;
    let provenance = if prompts.is_some_and(|p| p.prompt_length() > 0) {
        Provenance::Prompted
    } else {
        Provenance::ZeroShot
    };

    let mut per_class: Vec<ClassAccuracy> = names
        .iter()
        .map(|n| ClassAccuracy {
            class: n.clone(),
            correct: 0,
            total: 0,
            accuracy: 0.0,
        })
        .collect();
    let mut predictions = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let fi = Tensor::new(vec![cfg.d_joint], f.row(i).to_vec())?;
        let p = predict(&similarity(&z, &fi, provenance)?, f64::from(cfg.temperature))?;
        let predicted = class_ids[p.argmax()];
        let local = class_ids.iter().position(|&c| c == s.label).expect("sample in split");
        per_class[local].total += 1;
        if predicted == s.label {
            per_class[local].correct += 1;
        }
        predictions.push(ImagePrediction {
            label: s.label,
            index: s.index,
            predicted,
        });
    }
    for c in &mut per_class {
        c.accuracy = percent(c.correct, c.total);
    }
    let correct = per_class.iter().map(|c| c.correct).sum();
    let total = samples.len();
    Ok(SplitResult {
        split,
        classes: names,
        per_class,
        correct,
        total,
        accuracy: percent(correct, total),
        predictions,
    })
}

fn percent(correct: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * correct as f64 / total as f64
    }
}

/// `2·b·n / (b + n)` for accuracies in percent.
pub fn harmonic_mean(base: f64, novel: f64) -> Result<f64> {
    for (name, v) in [("base", base), ("novel", novel)] {
        if !(v > 0.0 && v <= 100.0) {
            return Err(Error::Numeric(format!("{name} accuracy must be in (0, 100], got {v}")));
        }
    }
    Ok(2.0 * base * novel / (base + novel))
}

/// Harmonic mean with its limit value 0 when either accuracy is 0.
pub fn harmonic_mean_or_zero(base: f64, novel: f64) -> Result<f64> {
    if base == 0.0 || novel == 0.0 {
        return Ok(0.0);
    }
    harmonic_mean(base, novel)
}

/// Mean and population standard deviation (divide by n), summed in order.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub mean: f64,
    pub std: f64,
}

pub fn population_stats(values: &[f64]) -> Result<Stats> {
    if values.is_empty() {
        return Err(Error::Usage("statistics of an empty column".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok(Stats { mean, std: var.sqrt() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn harmonic_mean_examples() {
        assert!((harmonic_mean(81.99, 75.11).unwrap() - 78.40).abs() < 0.005);
        assert!((harmonic_mean(82.69, 63.22).unwrap() - 71.66).abs() < 0.005);
        assert_eq!(harmonic_mean(73.5, 73.5).unwrap(), 73.5);
        assert!(matches!(harmonic_mean(0.0, 50.0), Err(Error::Numeric(_))));
        assert_eq!(harmonic_mean_or_zero(0.0, 50.0).unwrap(), 0.0);
    }

    #[test]
    fn population_std() {
        let s = population_stats(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]).unwrap();
        assert_eq!(s.mean, 5.0);
        assert_eq!(s.std, 2.0);
        assert!(population_stats(&[]).is_err());
    }
}
