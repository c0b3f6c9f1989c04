//! Cosine similarity in the joint space, temperature softmax, and the
//! classification and distillation losses.
//!
//! The free functions work in f64 on plain vectors and serve evaluation and
//! logging. The `graph_*` functions build the same quantities on an autodiff
//! [`Graph`] for training.

use crate::error::{Error, Result};
use crate::tensor::{Real, Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

/// Lower clamp applied to probabilities inside logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    ZeroShot,
    Prompted,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// KL(teacher ‖ student).
    #[default]
    TeacherFirst,
    /// KL(student ‖ teacher).
    StudentFirst,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Logits {
    pub scores: Vec<f64>,
    pub provenance: Provenance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub probs: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub tau: f64,
}

impl Prediction {
    /// Wraps an explicit distribution (used for teachers loaded from disk and
    /// in tests). Entries must be non-negative and sum to 1 within 1e-6.
    pub fn from_probs(probs: Vec<f64>, tau: f64) -> Result<Self> {
        let sum: f64 = probs.iter().sum();
        if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Numeric(format!("not a probability vector (sum {sum})")));
        }
        let log_probs = probs.iter().map(|p| p.max(PROB_FLOOR).ln()).collect();
        Ok(Self { probs, log_probs, tau })
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }
}

/// Index of the first maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt()
}

/// Cosine similarity of `f` with every row of `z` (`C × d`).
pub fn similarity(z: &Tensor, f: &Tensor, provenance: Provenance) -> Result<Logits> {
    let d = f.len();
    if z.shape().len() != 2 || z.cols() != d {
        return Err(Error::dim("similarity", z.shape(), f.shape()));
    }
    let fnorm = norm(f.data());
    if fnorm == 0.0 {
        return Err(Error::Numeric("zero-norm image feature".into()));
    }
    let mut scores = Vec::with_capacity(z.rows());
    for j in 0..z.rows() {
        let row = z.row(j);
        let rnorm = norm(row);
        if rnorm == 0.0 {
            return Err(Error::Numeric(format!("zero-norm text feature for class {j}")));
        }
        let dot: f64 = row.iter().zip(f.data()).map(|(&a, &b)| f64::from(a) * f64::from(b)).sum();
        scores.push((dot / (rnorm * fnorm)).clamp(-1.0, 1.0));
    }
    Ok(Logits { scores, provenance })
}

/// Softmax of `scores / tau`, with log-probabilities kept alongside.
pub fn predict(logits: &Logits, tau: f64) -> Result<Prediction> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Config(format!("temperature must be > 0, got {tau}")));
    }
    let s = &logits.scores;
    if s.is_empty() {
        return Err(Error::Usage("cannot predict over zero classes".into()));
    }
    if s.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("non-finite logit".into()));
    }
    let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<f64> = s.iter().map(|x| (x - max) / tau).collect();
    let lse = shifted.iter().map(|x| x.exp()).sum::<f64>().ln();
    let log_probs: Vec<f64> = shifted.iter().map(|x| x - lse).collect();
    let probs = log_probs.iter().map(|x| x.exp()).collect();
    Ok(Prediction { probs, log_probs, tau })
}

pub fn ce_loss(p: &Prediction, label: usize) -> Result<f64> {
    let lp = p
        .log_probs
        .get(label)
        .ok_or_else(|| Error::Usage(format!("label {label} out of range for {} classes", p.len())))?;
    Ok(0.0 - lp)
}

/// Σ a·log(a/b) with both sides clamped at [`PROB_FLOOR`] inside the logs.
pub fn kl_divergence(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim("kl", &[a.len()], &[b.len()]));
    }
    Ok(a.iter()
        .zip(b)
        .filter(|(&x, _)| x > 0.0)
        .map(|(&x, &y)| x * (x.max(PROB_FLOOR).ln() - y.max(PROB_FLOOR).ln()))
        .sum())
}

/// KL(p_zs ‖ p): the zero-shot teacher comes first.
pub fn kl_loss(p: &Prediction, p_zs: &Prediction) -> Result<f64> {
    kl_loss_dir(p, p_zs, KlDirection::TeacherFirst)
}

pub fn kl_loss_dir(p: &Prediction, p_zs: &Prediction, dir: KlDirection) -> Result<f64> {
    match dir {
        KlDirection::TeacherFirst => kl_divergence(&p_zs.probs, &p.probs),
        KlDirection::StudentFirst => kl_divergence(&p.probs, &p_zs.probs),
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda >= 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("lambda must be >= 0, got {lambda}")))
    }
}

/// CE + λ·KL. With λ = 0 the KL term is skipped entirely.
pub fn stage1_loss(p: &Prediction, label: usize, p_zs: &Prediction, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    let ce = ce_loss(p, label)?;
    if lambda == 0.0 {
        return Ok(ce);
    }
    Ok(ce + lambda * kl_loss(p, p_zs)?)
}

pub fn stage2_loss(p: &Prediction, label: usize) -> Result<f64> {
    ce_loss(p, label)
}

/// `[B × C]` cosine similarities between image rows `f` and class rows `z`.
pub fn graph_logits<T: Real>(g: &mut Graph<T>, z: Var, f: Var) -> Result<Var> {
    let zn = g.normalize_rows(z)?;
    let fnorm = g.normalize_rows(f)?;
    let zt = g.transpose(zn)?;
    g.matmul(fnorm, zt)
}

pub fn graph_log_probs<T: Real>(g: &mut Graph<T>, logits: Var, tau: f32) -> Result<Var> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Config(format!("temperature must be > 0, got {tau}")));
    }
    let s = g.scale(logits, 1.0 / tau)?;
    g.log_softmax(s)
}

/// Mean cross-entropy over the batch rows of `log_probs`.
pub fn graph_ce<T: Real>(g: &mut Graph<T>, log_probs: Var, labels: &[usize]) -> Result<Var> {
    let shape = g.shape(log_probs).to_vec();
    let (b, c) = (shape[0], shape[1]);
    if labels.len() != b {
        return Err(Error::dim("ce labels", &[b], &[labels.len()]));
    }
    let mut onehot = vec![0.0f32; b * c];
    for (i, &l) in labels.iter().enumerate() {
        if l >= c {
            return Err(Error::Usage(format!("label {l} out of range for {c} classes")));
        }
        onehot[i * c + l] = 1.0;
    }
    let mask = g.constant(vec![b, c], onehot)?;
    let picked = g.mul(log_probs, mask)?;
    let total = g.sum(picked)?;
    g.scale(total, -1.0 / b as f32)
}

/// Mean KL over the batch between the student `log_probs` and fixed teacher
/// distributions. The teacher is a constant, so no gradient reaches it.
pub fn graph_kl<T: Real>(g: &mut Graph<T>, log_probs: Var, teacher: &[Prediction], dir: KlDirection) -> Result<Var> {
    let shape = g.shape(log_probs).to_vec();
    let (b, c) = (shape[0], shape[1]);
    if teacher.len() != b || teacher.iter().any(|t| t.len() != c) {
        return Err(Error::dim("kl teacher", &[b, c], &[teacher.len(), teacher.first().map_or(0, Prediction::len)]));
    }
    let floor = PROB_FLOOR.ln() as f32;
    let lp = g.clamp_min(log_probs, floor)?;
    let total = match dir {
        KlDirection::TeacherFirst => {
            // Σ q·log q is constant; only −Σ q·log p carries gradient.
            let q: Vec<f32> = teacher.iter().flat_map(|t| t.probs.iter().map(|&x| x as f32)).collect();
            let entropy_term: f64 = teacher
                .iter()
                .flat_map(|t| t.probs.iter())
                .filter(|&&x| x > 0.0)
                .map(|&x| x * x.max(PROB_FLOOR).ln())
                .sum();
            let qv = g.constant(vec![b, c], q)?;
            let cross = g.mul(lp, qv)?;
            let cross = g.sum(cross)?;
            let h = g.constant(vec![1], vec![entropy_term as f32])?;
            g.sub(h, cross)?
        }
        KlDirection::StudentFirst => {
            let lq: Vec<f32> = teacher
                .iter()
                .flat_map(|t| t.probs.iter().map(|&x| x.max(PROB_FLOOR).ln() as f32))
                .collect();
            let lqv = g.constant(vec![b, c], lq)?;
            let p = g.exp(log_probs)?;
            let diff = g.sub(lp, lqv)?;
            let terms = g.mul(p, diff)?;
            g.sum(terms)?
        }
    };
    g.scale(total, 1.0 / b as f32)
}

/// The pieces of a training objective as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub ce: Var,
    pub kl: Option<Var>,
}

/// CE + λ·KL on the graph. With λ = 0 the total is the CE node itself.
pub fn graph_stage1_loss<T: Real>(
    g: &mut Graph<T>,
    log_probs: Var,
    labels: &[usize],
    teacher: &[Prediction],
    lambda: f32,
    dir: KlDirection,
) -> Result<LossParts> {
    check_lambda(f64::from(lambda))?;
    let ce = graph_ce(g, log_probs, labels)?;
    let kl = graph_kl(g, log_probs, teacher, dir)?;
    let total = if lambda == 0.0 {
        ce
    } else {
        let weighted = g.scale(kl, lambda)?;
        g.add(ce, weighted)?
    };
    Ok(LossParts { total, ce, kl: Some(kl) })
}

pub fn graph_stage2_loss<T: Real>(g: &mut Graph<T>, log_probs: Var, labels: &[usize]) -> Result<LossParts> {
    let ce = graph_ce(g, log_probs, labels)?;
    Ok(LossParts { total: ce, ce, kl: None })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits(v: &[f64]) -> Logits {
        Logits {
            scores: v.to_vec(),
            provenance: Provenance::Prompted,
        }
    }

    fn t(shape: Vec<usize>, data: Vec<f32>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn cosine_basics() {
        let z = t(vec![2, 2], vec![1.0, 0.0, 0.0, 3.0]);
        let s = similarity(&z, &t(vec![2], vec![5.0, 0.0]), Provenance::ZeroShot).unwrap();
        assert!((s.scores[0] - 1.0).abs() < 1e-6);
        assert!(s.scores[1].abs() < 1e-6);
    }

    #[test]
    fn zero_norm_row_names_class() {
        let z = t(vec![3, 2], vec![1.0, 0.0, 0.0, 0.0, 1.0, 1.0]);
        match similarity(&z, &t(vec![2], vec![1.0, 1.0]), Provenance::ZeroShot) {
            Err(Error::Numeric(msg)) => assert!(msg.contains("class 1"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn predict_examples() {
        let p = predict(&logits(&[0.3, 0.3]), 0.01).unwrap();
        assert_eq!(p.probs, vec![0.5, 0.5]);
        let p = predict(&logits(&[1.0, 0.0]), 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((p.probs[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((p.probs[0] - 0.7311).abs() < 1e-4);
        let p = predict(&logits(&[0.2, 0.1, 0.15]), 0.001).unwrap();
        assert!(p.probs[0] > 0.99);
        assert!(matches!(predict(&logits(&[0.0, 1.0]), 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn loss_examples() {
        let uniform = Prediction::from_probs(vec![0.25; 4], 1.0).unwrap();
        assert!((ce_loss(&uniform, 3).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert!(matches!(ce_loss(&uniform, 4), Err(Error::Usage(_))));
        let sure = Prediction::from_probs(vec![1.0, 0.0], 1.0).unwrap();
        assert_eq!(ce_loss(&sure, 0).unwrap().to_bits(), 0f64.to_bits());

        let half = Prediction::from_probs(vec![0.5, 0.5], 1.0).unwrap();
        assert!((kl_loss(&half, &sure).unwrap() - 2f64.ln()).abs() < 1e-6);
        assert!(kl_loss(&half, &half).unwrap().abs() < 1e-9);
        assert!(matches!(kl_loss(&half, &uniform), Err(Error::Dimension { .. })));

        let p = predict(&logits(&[0.1, 0.4, -0.2]), 0.1).unwrap();
        let q = predict(&logits(&[0.3, 0.0, 0.1]), 0.1).unwrap();
        let ce = ce_loss(&p, 2).unwrap();
        assert_eq!(stage1_loss(&p, 2, &q, 0.0).unwrap().to_bits(), ce.to_bits());
        assert_eq!(stage1_loss(&p, 2, &p, 0.5).unwrap(), ce);
        assert_eq!(stage2_loss(&p, 1).unwrap().to_bits(), ce_loss(&p, 1).unwrap().to_bits());
        assert!(stage1_loss(&p, 2, &q, -1.0).is_err());
    }

    #[test]
    fn graph_losses_match_scalar_versions() {
        let scores = [[0.1f32, 0.4, -0.2], [0.3, 0.0, 0.1]];
        let tau = 0.1f32;
        let teacher: Vec<Prediction> = [[0.2, 0.5, 0.3], [0.6, 0.1, 0.3]]
            .iter()
            .map(|p| Prediction::from_probs(p.to_vec(), 1.0).unwrap())
            .collect();
        let labels = [1usize, 0];
        let mut g = Graph::new();
        let x = g.constant(vec![2, 3], scores.concat()).unwrap();
        let lp = graph_log_probs(&mut g, x, tau).unwrap();
        for dir in [KlDirection::TeacherFirst, KlDirection::StudentFirst] {
            let parts = graph_stage1_loss(&mut g, lp, &labels, &teacher, 0.5, dir).unwrap();
            let (mut ce, mut kl) = (0.0, 0.0);
            for i in 0..2 {
                let p = predict(&logits(&scores[i].map(f64::from)), f64::from(tau)).unwrap();
                ce += ce_loss(&p, labels[i]).unwrap() / 2.0;
                kl += kl_loss_dir(&p, &teacher[i], dir).unwrap() / 2.0;
            }
            assert!((f64::from(g.scalar(parts.ce)) - ce).abs() < 1e-5);
            assert!((f64::from(g.scalar(parts.kl.unwrap())) - kl).abs() < 1e-5, "{dir:?}");
            assert!((f64::from(g.scalar(parts.total)) - (ce + 0.5 * kl)).abs() < 1e-5);
        }
    }
}
