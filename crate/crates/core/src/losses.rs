//! Training objectives.
//!
//! Each loss exists in two forms: a graph builder used inside training steps
//! (so gradients flow back into the encoders), and a plain function over
//! values that evaluates the same graph on constants.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Temperature of the view-contrastive loss.
pub const DEFAULT_SIMCLR_TEMPERATURE: f64 = 0.5;

/// Cosine similarities of one image to the two class prototypes, and the
/// temperature that divides them before the softmax.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimilarityLogits {
    pub s_real: f64,
    pub s_spoof: f64,
    pub temperature: f64,
}

impl SimilarityLogits {
    pub fn new(s_real: f64, s_spoof: f64, temperature: f64) -> Result<Self> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::InvalidInput(format!("temperature must be positive, got {temperature}")));
        }
        Ok(Self {
            s_real,
            s_spoof,
            temperature,
        })
    }
}

/// Weights of the joint objective `α·L_ce + β·L_simclr + γ·L_mse`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
        }
    }
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Result<Self> {
        let w = Self { alpha, beta, gamma };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.beta, self.gamma];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidInput("loss weights must be finite and nonnegative".into()));
        }
        if all.iter().all(|v| *v == 0.0) {
            return Err(Error::InvalidInput("at least one loss weight must be positive".into()));
        }
        Ok(())
    }
}

/// `a·b / (‖a‖‖b‖)`.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("vectors of length {} and {}", a.len(), b.len())));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// `(p_real, p_spoof)` from a softmax over the temperature-scaled
/// similarities.
pub fn similarity_softmax(logits: SimilarityLogits) -> (f64, f64) {
    let a = logits.s_real / logits.temperature;
    let b = logits.s_spoof / logits.temperature;
    let m = a.max(b);
    let (ea, eb) = ((a - m).exp(), (b - m).exp());
    let total = ea + eb;
    (ea / total, eb / total)
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    if labels.len() != rows {
        return Err(Error::Shape(format!("{} labels for {rows} logit rows", labels.len())));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::InvalidInput(format!("label {bad} outside the {classes} classes")));
    }
    Ok(())
}

/// Mean negative log-likelihood of `labels` under a row-wise softmax.
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let (rows, cols) = g.value(logits).dim();
    check_labels(labels, rows, cols)?;
    let logp = g.log_softmax_rows(logits);
    let picked = g.pick(logp, labels.to_vec());
    let mean = g.mean(picked);
    Ok(g.scale(mean, -1.0))
}

pub fn ce_loss(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let out = cross_entropy(&mut g, l, labels)?;
    Ok(g.scalar(out))
}

/// Row-wise cosine similarity of two `n × d` nodes, as `n × 1`.
pub fn cosine_rows(g: &mut Graph, a: Var, b: Var) -> Var {
    let a = g.l2_normalize_rows(a);
    let b = g.l2_normalize_rows(b);
    let prod = g.mul(a, b);
    g.sum_cols(prod)
}

/// `n × 2` classification logits: cosine similarity of each image
/// embedding to each class prototype, multiplied by `scale` (= 1/τ).
pub fn similarity_logits(g: &mut Graph, images: Var, prototypes: Var, scale: Var) -> Var {
    let x = g.l2_normalize_rows(images);
    let z = g.l2_normalize_rows(prototypes);
    let sims = g.matmul_bt(x, z);
    g.scale_by(sims, scale)
}

/// NT-Xent over the `2n` views `[h1; h2]`: every view is an anchor whose
/// positive is its counterpart and whose negatives are the other `2n − 2`
/// views, with cosine similarities divided by `temperature`.
pub fn nt_xent(g: &mut Graph, h1: Var, h2: Var, temperature: f64) -> Result<Var> {
    let (n, d) = g.value(h1).dim();
    if g.value(h2).dim() != (n, d) {
        return Err(Error::Shape(format!(
            "view batches differ: {:?} vs {:?}",
            (n, d),
            g.value(h2).dim()
        )));
    }
    if n < 2 {
        return Err(Error::InvalidInput(format!(
            "contrastive loss needs at least 2 samples per view, got {n}"
        )));
    }
    if !(temperature > 0.0) {
        return Err(Error::InvalidInput(format!("temperature must be positive, got {temperature}")));
    }
    let all = g.concat_rows(&[h1, h2]);
    let unit = g.l2_normalize_rows(all);
    let sims = g.matmul_bt(unit, unit);
    let sims = g.scale(sims, 1.0 / temperature);
    let mask = g.constant(Array2::from_shape_fn((2 * n, 2 * n), |(i, j)| {
        if i == j {
            f64::NEG_INFINITY
        } else {
            0.0
        }
    }));
    let masked = g.add(sims, mask);
    let logp = g.log_softmax_rows(masked);
    let positives = (0..2 * n).map(|i| (i + n) % (2 * n)).collect();
    let picked = g.pick(logp, positives);
    let mean = g.mean(picked);
    Ok(g.scale(mean, -1.0))
}

pub fn simclr_loss(h1: &Tensor, h2: &Tensor, temperature: f64) -> Result<f64> {
    if h1.iter().chain(h2.iter()).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("projections must be finite".into()));
    }
    for row in h1.rows().into_iter().chain(h2.rows()) {
        if row.iter().all(|v| *v == 0.0) {
            return Err(Error::ZeroNorm);
        }
    }
    let mut g = Graph::new();
    let a = g.constant(h1.clone());
    let b = g.constant(h2.clone());
    let out = nt_xent(&mut g, a, b, temperature)?;
    Ok(g.scalar(out))
}

/// Batch mean of `(cos(x1, z1) − cos(x2, z2))²` over rows.
pub fn mse_consistency_graph(g: &mut Graph, x1: Var, z1: Var, x2: Var, z2: Var) -> Var {
    let s1 = cosine_rows(g, x1, z1);
    let s2 = cosine_rows(g, x2, z2);
    let d = g.sub(s1, s2);
    let sq = g.square(d);
    g.mean(sq)
}

/// Squared difference between the two image-text view similarities.
pub fn mse_consistency(x_v1: &[f64], z_v1: &[f64], x_v2: &[f64], z_v2: &[f64]) -> Result<f64> {
    let d = cosine_sim(x_v1, z_v1)? - cosine_sim(x_v2, z_v2)?;
    Ok(d * d)
}

pub fn joint_loss(l_ce: f64, l_simclr: f64, l_mse: f64, w: LossWeights) -> f64 {
    w.alpha * l_ce + w.beta * l_simclr + w.gamma * l_mse
}

/// Graph form of [`joint_loss`].
pub fn joint_graph(g: &mut Graph, l_ce: Var, l_simclr: Var, l_mse: Var, w: LossWeights) -> Var {
    let a = g.scale(l_ce, w.alpha);
    let b = g.scale(l_simclr, w.beta);
    let c = g.scale(l_mse, w.gamma);
    let ab = g.add(a, b);
    g.add(ab, c)
}
