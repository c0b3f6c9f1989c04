//! Procedurally rendered few-shot classification data.

use crate::error::{Error, Result};
use crate::image_adapter::ImageGrid;
use crate::tensor::hex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    /// Filled disc on a flat background.
    Circle,
    /// Filled axis-aligned square on a flat background.
    Square,
    /// Vertical bars across the whole image.
    Stripes,
    /// Checkerboard across the whole image.
    Checker,
}

impl ShapeKind {
    pub fn is_texture(self) -> bool {
        matches!(self, ShapeKind::Stripes | ShapeKind::Checker)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassRecipe {
    pub name: String,
    pub kind: ShapeKind,
    /// Texture period in pixels, or shape radius / half side for smooth kinds.
    pub scale: f64,
    pub color: [f32; 3],
    pub noise: f32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Base,
    Novel,
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub seed: u64,
    pub image_side: usize,
    pub channels: usize,
    /// Training images per base class.
    pub shots: usize,
    /// Held-out images per class (base and novel).
    pub eval_per_class: usize,
    pub classes: Vec<ClassRecipe>,
    pub base: Vec<usize>,
    pub novel: Vec<usize>,
}

const RED: [f32; 3] = [0.85, 0.2, 0.15];
const BLUE: [f32; 3] = [0.15, 0.3, 0.85];

impl Default for DatasetSpec {
    /// Eight classes: four kinds in two colours. Every class word appears in
    /// at least one base class name, so novel names are new combinations of
    /// known words.
    fn default() -> Self {
        let recipe = |name: &str, kind, scale, color| ClassRecipe {
            name: name.into(),
            kind,
            scale,
            color,
            noise: 0.06,
        };
        Self {
            seed: 7,
            image_side: 32,
            channels: 3,
            shots: 16,
            eval_per_class: 64,
            classes: vec![
                recipe("red circle", ShapeKind::Circle, 8.0, RED),
                recipe("blue square", ShapeKind::Square, 7.0, BLUE),
                recipe("red stripes", ShapeKind::Stripes, 4.0, RED),
                recipe("blue checker", ShapeKind::Checker, 4.0, BLUE),
                recipe("blue circle", ShapeKind::Circle, 8.0, BLUE),
                recipe("red square", ShapeKind::Square, 7.0, RED),
                recipe("blue stripes", ShapeKind::Stripes, 4.0, BLUE),
                recipe("red checker", ShapeKind::Checker, 4.0, RED),
            ],
            base: vec![0, 1, 2, 3],
            novel: vec![4, 5, 6, 7],
        }
    }
}

impl DatasetSpec {
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        let c = self.classes.len();
        if c < 2 {
            p.push(format!("dataset.classes needs at least 2 entries, got {c}"));
        }
        if self.image_side == 0 {
            p.push("dataset.image_side must be positive".into());
        }
        if !(self.channels == 1 || self.channels == 3) {
            p.push(format!("dataset.channels must be 1 or 3, got {}", self.channels));
        }
        if self.shots == 0 {
            p.push("dataset.shots must be positive".into());
        }
        if self.eval_per_class == 0 {
            p.push("dataset.eval_per_class must be positive".into());
        }
        let mut seen = vec![0usize; c];
        for &i in self.base.iter().chain(&self.novel) {
            if i >= c {
                p.push(format!("dataset partition index {i} out of range for {c} classes"));
            } else {
                seen[i] += 1;
            }
        }
        if seen.iter().any(|&n| n > 1) {
            p.push("dataset.base and dataset.novel must be disjoint".into());
        }
        if seen.contains(&0) {
            p.push("dataset.base and dataset.novel must cover every class".into());
        }
        if self.base.is_empty() || self.novel.is_empty() {
            p.push("dataset.base and dataset.novel must both be non-empty".into());
        }
        for (i, r) in self.classes.iter().enumerate() {
            if crate::encoders::split_words(&r.name).is_empty() {
                p.push(format!("dataset.classes[{i}].name has no words"));
            }
            if !(r.scale > 0.0) {
                p.push(format!("dataset.classes[{i}].scale must be > 0"));
            }
            if !(r.noise >= 0.0) {
                p.push(format!("dataset.classes[{i}].noise must be >= 0"));
            }
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p.join("; ")))
        }
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|r| r.name.clone()).collect()
    }

    /// Global class indices of a split.
    pub fn split_classes(&self, split: Split) -> Vec<usize> {
        match split {
            Split::Base => self.base.clone(),
            Split::Novel => self.novel.clone(),
            Split::All => (0..self.classes.len()).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: ImageGrid,
    /// Global class index.
    pub label: usize,
    /// Position within its class.
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    /// Base-class training shots, grouped by class.
    pub train: Vec<Sample>,
    /// Held-out images for every class, grouped by class.
    pub eval: Vec<Sample>,
    pub fingerprint: String,
}

impl Dataset {
    pub fn class_names(&self) -> Vec<String> {
        self.spec.class_names()
    }

    /// Held-out samples whose class belongs to `split`.
    pub fn eval_split(&self, split: Split) -> Vec<&Sample> {
        let classes = self.spec.split_classes(split);
        self.eval.iter().filter(|s| classes.contains(&s.label)).collect()
    }
}

fn sample_rng(seed: u64, part: u64, class: usize, index: usize) -> ChaCha8Rng {
    let mut h = Sha256::new();
    for v in [seed, part, class as u64, index as u64] {
        h.update(v.to_le_bytes());
    }
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// Renders one image. The result depends only on the recipe and the rng.
pub fn render(recipe: &ClassRecipe, side: usize, channels: usize, rng: &mut ChaCha8Rng) -> Result<ImageGrid> {
    let s = side as f64;
    let bg: f32 = rng.random_range(0.4..0.6);
    let cx = s / 2.0 + rng.random_range(-3.0..3.0);
    let cy = s / 2.0 + rng.random_range(-3.0..3.0);
    let size = recipe.scale * rng.random_range(0.85..1.15);
    let phase = rng.random_range(0..2) as f64;
    let noise = Normal::new(0.0f32, recipe.noise.max(f32::MIN_POSITIVE))
        .map_err(|e| Error::Config(format!("noise: {e}")))?;
    let mut data = vec![0.0f32; channels * side * side];
    for y in 0..side {
        for x in 0..side {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let on = match recipe.kind {
                ShapeKind::Circle => (fx - cx).powi(2) + (fy - cy).powi(2) <= size * size,
                ShapeKind::Square => (fx - cx).abs() <= size && (fy - cy).abs() <= size,
                ShapeKind::Stripes => ((x as f64 + phase) / (recipe.scale / 2.0)).floor() as i64 % 2 == 0,
                ShapeKind::Checker => {
                    let cell = recipe.scale / 2.0;
                    let a = ((x as f64 + phase) / cell).floor() as i64;
                    let b = ((y as f64 + phase) / cell).floor() as i64;
                    (a + b) % 2 == 0
                }
            };
            for c in 0..channels {
                let fg = if channels == 1 {
                    (recipe.color[0] + recipe.color[1] + recipe.color[2]) / 3.0
                } else {
                    recipe.color[c]
                };
                let v = if on { fg } else { bg };
                let n = if recipe.noise > 0.0 { noise.sample(rng) } else { 0.0 };
                data[(c * side + y) * side + x] = (v + n).clamp(0.0, 1.0);
            }
        }
    }
    ImageGrid::new(side, side, channels, data)
}

fn fingerprint(spec: &DatasetSpec, train: &[Sample], eval: &[Sample]) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(spec).expect("spec serializes"));
    for s in train.iter().chain(eval) {
        h.update((s.label as u64).to_le_bytes());
        for v in s.image.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex(&h.finalize())
}

/// Every image is rendered from its own stream keyed by
/// (seed, split, class, index), so the dataset is reproducible piecewise.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut train = Vec::new();
    for &c in &spec.base {
        for i in 0..spec.shots {
            let mut rng = sample_rng(spec.seed, 0, c, i);
            let image = render(&spec.classes[c], spec.image_side, spec.channels, &mut rng)?;
            train.push(Sample { image, label: c, index: i });
        }
    }
    let mut eval = Vec::new();
    for c in 0..spec.classes.len() {
        for i in 0..spec.eval_per_class {
            let mut rng = sample_rng(spec.seed, 1, c, i);
            let image = render(&spec.classes[c], spec.image_side, spec.channels, &mut rng)?;
            eval.push(Sample { image, label: c, index: i });
        }
    }
    let fingerprint = fingerprint(spec, &train, &eval);
    Ok(Dataset {
        spec: spec.clone(),
        train,
        eval,
        fingerprint,
    })
}

/// Pixel-space nearest-centroid accuracy over all classes: centroids from the
/// first half of each class's held-out images, scored on the second half.
pub fn nearest_centroid_accuracy(ds: &Dataset) -> f64 {
    let c = ds.spec.classes.len();
    let half = ds.spec.eval_per_class / 2;
    let dim = ds.eval[0].image.data().len();
    let mut centroids = vec![vec![0.0f64; dim]; c];
    for s in ds.eval.iter().filter(|s| s.index < half.max(1)) {
        for (a, &v) in centroids[s.label].iter_mut().zip(s.image.data()) {
            *a += f64::from(v) / half.max(1) as f64;
        }
    }
    let test: Vec<&Sample> = ds.eval.iter().filter(|s| s.index >= half).collect();
    let correct = test
        .iter()
        .filter(|s| {
            let dist = |k: usize| -> f64 {
                centroids[k]
                    .iter()
                    .zip(s.image.data())
                    .map(|(&a, &b)| (a - f64::from(b)).powi(2))
                    .sum()
            };
            let best = (0..c).min_by(|&a, &b| dist(a).total_cmp(&dist(b))).unwrap_or(0);
            best == s.label
        })
        .count();
    correct as f64 / test.len().max(1) as f64
}
