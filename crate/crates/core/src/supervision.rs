//! Softmax heads, cross-entropy, the weighted two-head objective and the
//! auxiliary-weight decay schedule.

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::tensor::Tensor;

/// Probabilities are clamped to this floor before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

/// Integer class labels in `[0, num_classes)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelBatch {
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabelBatch {
    pub fn new(labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
            bail!(Label, "label {bad} out of range for {num_classes} classes");
        }
        Ok(LabelBatch { labels, num_classes })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn rows(op: &str, t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [n, k] if k >= 2 => Ok((n, k)),
        ref s => bail!(Shape, "{op} expects [N, K] with K >= 2, got {s:?}"),
    }
}

fn check_labels(op: &str, n: usize, k: usize, y: &LabelBatch) -> Result<()> {
    if y.num_classes != k {
        bail!(Label, "{op}: labels are over {} classes, scores over {k}", y.num_classes);
    }
    if y.len() != n {
        bail!(Label, "{op}: {} labels for {n} rows", y.len());
    }
    Ok(())
}

/// Row-wise softmax, shifted by the row maximum.
pub fn softmax_prob(logits: &Tensor) -> Result<Tensor> {
    let (_, k) = rows("softmax", logits)?;
    if !logits.is_finite() {
        bail!(Numeric, "non-finite logits");
    }
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks_exact(k) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        out.extend(row.iter().map(|v| (v - max).exp()));
        let sum: f64 = out[start..].iter().sum();
        for v in &mut out[start..] {
            *v /= sum;
        }
    }
    Tensor::new(logits.shape().to_vec(), out)
}

/// Batch mean of `-ln p[true class]`, with `p` clamped below at
/// [`PROB_FLOOR`].
pub fn cross_entropy(probs: &Tensor, y: &LabelBatch) -> Result<f64> {
    let (n, k) = rows("cross_entropy", probs)?;
    check_labels("cross_entropy", n, k, y)?;
    for (i, row) in probs.data().chunks_exact(k).enumerate() {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-8 {
            bail!(Numeric, "row {i} of probabilities sums to {s}");
        }
    }
    let total: f64 = probs
        .data()
        .chunks_exact(k)
        .zip(y.labels())
        .map(|(row, &l)| -row[l].max(PROB_FLOOR).ln())
        .sum();
    Ok(total / n as f64)
}

/// Gradient of the batch-mean cross-entropy w.r.t. the logits:
/// `(softmax(logits) - onehot(y)) / N`.
pub fn softmax_xent_backward(logits: &Tensor, y: &LabelBatch) -> Result<Tensor> {
    let (n, k) = rows("softmax_xent_backward", logits)?;
    check_labels("softmax_xent_backward", n, k, y)?;
    let mut g = softmax_prob(logits)?;
    let inv = 1.0 / n as f64;
    for (row, &l) in g.data_mut().chunks_exact_mut(k).zip(y.labels()) {
        row[l] -= 1.0;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
    Ok(g)
}

/// Softmax followed by cross-entropy, plus the logit gradient.
pub fn softmax_xent(logits: &Tensor, y: &LabelBatch) -> Result<(f64, Tensor)> {
    let probs = softmax_prob(logits)?;
    let loss = cross_entropy(&probs, y)?;
    Ok((loss, softmax_xent_backward(logits, y)?))
}

/// How the auxiliary weight decays with the epoch index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaDecay {
    /// `alpha0 * (1 - t / N)`.
    #[default]
    Closed,
    /// `alpha0 * prod_{s=1..t} (1 - s / N)`: the update
    /// `alpha <- alpha * (1 - t / N)` applied once per completed epoch.
    Recursive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SupervisionSchedule {
    pub alpha0: f64,
    pub total_epochs: usize,
    pub decay: AlphaDecay,
}

impl SupervisionSchedule {
    pub fn new(alpha0: f64, total_epochs: usize, decay: AlphaDecay) -> Result<Self> {
        if !(alpha0 >= 0.0) || !alpha0.is_finite() {
            bail!(Param, "alpha0 must be a non-negative number, got {alpha0}");
        }
        if total_epochs == 0 {
            bail!(Param, "total epochs must be positive");
        }
        Ok(SupervisionSchedule {
            alpha0,
            total_epochs,
            decay,
        })
    }
}

/// Auxiliary-loss weight at epoch `t` (0-based), for `0 <= t <= N`.
pub fn alpha_at(sched: &SupervisionSchedule, t: usize) -> Result<f64> {
    let n = sched.total_epochs;
    if t > n {
        bail!(Schedule, "epoch {t} is past the {n}-epoch schedule");
    }
    let n = n as f64;
    Ok(match sched.decay {
        AlphaDecay::Closed => sched.alpha0 * (1.0 - t as f64 / n),
        AlphaDecay::Recursive => (1..=t).fold(sched.alpha0, |a, s| a * (1.0 - s as f64 / n)),
    })
}

/// `main + alpha * aux`.
pub fn combined_loss(main: f64, aux: f64, alpha: f64) -> Result<f64> {
    if !(alpha >= 0.0) {
        bail!(Param, "alpha must be non-negative, got {alpha}");
    }
    Ok(main + alpha * aux)
}
