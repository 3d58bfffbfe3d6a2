//! Softened softmax, cross-entropy, KL divergence and the distillation losses.
//!
//! Every loss is averaged over the batch rows. Logarithms are taken of
//! `max(q, LOG_FLOOR)`; stored probabilities are never modified.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Error, Result};
use crate::matrix::Matrix;
use crate::robust_weights::GroupWeights;

pub const LOG_FLOOR: f64 = 1e-12;

#[inline]
fn safe_ln(q: f64) -> f64 {
    q.max(LOG_FLOOR).ln()
}

/// Row-stochastic matrix: entries in `[0, 1]`, every row summing to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbBatch(Matrix);

impl ProbBatch {
    pub fn new(probs: Matrix) -> Result<Self> {
        for i in 0..probs.rows() {
            let row = probs.row(i);
            if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(Error::Numeric(format!("row {i} has entries outside [0, 1]")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Numeric(format!("row {i} sums to {sum}")));
            }
        }
        Ok(Self(probs))
    }

    /// One-hot encoding of integer labels.
    pub fn one_hot(labels: &[usize], classes: usize) -> Result<Self> {
        if labels.is_empty() || classes == 0 {
            return Err(shape_err!("one-hot needs at least one label and one class"));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(shape_err!("label {bad} out of range for {classes} classes"));
        }
        Ok(Self(Matrix::from_fn(labels.len(), classes, |i, j| if labels[i] == j { 1.0 } else { 0.0 })))
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    pub fn rows(&self) -> usize {
        self.0.rows()
    }

    pub fn cols(&self) -> usize {
        self.0.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.0.row(i)
    }
}

/// Weighting and temperature of the distillation loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KdConfig {
    pub alpha: f64,
    pub tau: f64,
}

impl Default for KdConfig {
    fn default() -> Self {
        Self { alpha: 0.9, tau: 4.0 }
    }
}

impl KdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(config_err!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        check_tau(self.tau)
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(config_err!("tau must be positive, got {tau}"))
    }
}

fn same_shape(a: &Matrix, b: &Matrix, what: &str) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(shape_err!(
            "{what}: {}x{} against {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        ))
    }
}

/// Row-wise `softmax(logits / tau)`, stabilised by subtracting the row max.
pub fn softmax_tau(logits: &Matrix, tau: f64) -> Result<ProbBatch> {
    check_tau(tau)?;
    let mut out = logits.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = ((*v - max) / tau).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Ok(ProbBatch(out))
}

/// Mean over rows of `-Σ_c p_c log q_c`.
pub fn cross_entropy(target: &ProbBatch, pred: &ProbBatch) -> Result<f64> {
    same_shape(target.matrix(), pred.matrix(), "cross_entropy")?;
    let n = target.rows();
    let total: f64 = (0..n)
        .map(|i| {
            target
                .row(i)
                .iter()
                .zip(pred.row(i))
                .filter(|(&p, _)| p > 0.0)
                .map(|(&p, &q)| -p * safe_ln(q))
                .sum::<f64>()
        })
        .sum();
    Ok(total / n as f64)
}

/// Mean over rows of `Σ_c p_c log(p_c / q_c)`, with `0 log 0 = 0`.
pub fn kl_div(p: &ProbBatch, q: &ProbBatch) -> Result<f64> {
    same_shape(p.matrix(), q.matrix(), "kl_div")?;
    let n = p.rows();
    let total: f64 = (0..n)
        .map(|i| {
            p.row(i)
                .iter()
                .zip(q.row(i))
                .filter(|(&pc, _)| pc > 0.0)
                .map(|(&pc, &qc)| pc * (safe_ln(pc) - safe_ln(qc)))
                .sum::<f64>()
        })
        .sum();
    Ok(total / n as f64)
}

/// Mean cross-entropy of `softmax(logits)` against `labels`, and its logit gradient `(σ(z) - y) / n`.
pub fn ce_loss(labels: &ProbBatch, logits: &Matrix) -> Result<(f64, Matrix)> {
    same_shape(labels.matrix(), logits, "ce_loss")?;
    let probs = softmax_tau(logits, 1.0)?;
    let loss = cross_entropy(labels, &probs)?;
    let n = logits.rows() as f64;
    let mut grad = probs.into_matrix();
    for (g, &y) in grad.as_mut_slice().iter_mut().zip(labels.matrix().as_slice()) {
        *g = (*g - y) / n;
    }
    Ok((loss, grad))
}

/// Distillation loss
///
/// ```text
/// L = (1 - α) H(y, σ(z_S)) + α τ² KL(p_T ‖ σ(z_S / τ))
/// ```
///
/// where `p_T` is the teacher distribution already softened at the same `τ`.
/// Returns the loss and its exact gradient with respect to the raw student logits,
/// `(1 - α)(σ(z_S) - y)/n + α τ (σ(z_S/τ) - p_T)/n`.
pub fn kd_loss(
    labels: &ProbBatch,
    student_logits: &Matrix,
    teacher_probs_tau: &ProbBatch,
    cfg: &KdConfig,
) -> Result<(f64, Matrix)> {
    cfg.validate()?;
    same_shape(labels.matrix(), student_logits, "kd_loss labels/logits")?;
    same_shape(teacher_probs_tau.matrix(), student_logits, "kd_loss teacher/logits")?;
    let KdConfig { alpha, tau } = *cfg;
    let hard = softmax_tau(student_logits, 1.0)?;
    let soft = softmax_tau(student_logits, tau)?;
    let loss = (1.0 - alpha) * cross_entropy(labels, &hard)? + alpha * tau * tau * kl_div(teacher_probs_tau, &soft)?;
    let n = student_logits.rows() as f64;
    let grad = Matrix::from_fn(student_logits.rows(), student_logits.cols(), |i, j| {
        (1.0 - alpha) * (hard.row(i)[j] - labels.row(i)[j]) / n
            + alpha * tau * (soft.row(i)[j] - teacher_probs_tau.row(i)[j]) / n
    });
    Ok((loss, grad))
}

/// One loss value per domain plus the number of samples behind it.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupLossVector {
    pub losses: Vec<f64>,
    pub counts: Vec<usize>,
}

impl GroupLossVector {
    pub fn new(losses: Vec<f64>, counts: Vec<usize>) -> Result<Self> {
        if losses.len() != counts.len() {
            return Err(shape_err!("{} losses but {} counts", losses.len(), counts.len()));
        }
        if losses.iter().any(|l| !l.is_finite()) {
            return Err(Error::Numeric("group losses must be finite".into()));
        }
        Ok(Self { losses, counts })
    }

    /// Every group counted as populated.
    pub fn dense(losses: Vec<f64>) -> Result<Self> {
        let counts = vec![1; losses.len()];
        Self::new(losses, counts)
    }

    pub fn len(&self) -> usize {
        self.losses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.losses.is_empty()
    }
}

/// Value of the group-weighted objective and the domains that had no samples.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedGroupLoss {
    pub value: f64,
    pub empty_groups: Vec<usize>,
}

/// `Σ_d w_d · L_d`; domains without samples contribute nothing and are reported.
pub fn group_distil_loss(per_group: &GroupLossVector, weights: &GroupWeights) -> Result<WeightedGroupLoss> {
    let w = weights.as_slice();
    if w.len() != per_group.len() {
        return Err(shape_err!("{} group weights for {} group losses", w.len(), per_group.len()));
    }
    let mut value = 0.0;
    let mut empty_groups = Vec::new();
    for (d, ((&wd, &loss), &count)) in w.iter().zip(&per_group.losses).zip(&per_group.counts).enumerate() {
        if count == 0 {
            empty_groups.push(d);
        } else {
            value += wd * loss;
        }
    }
    Ok(WeightedGroupLoss { value, empty_groups })
}

/// Distillation loss of each domain present in a mixed batch.
pub fn per_group_kd_losses(
    labels: &[usize],
    domains: &[usize],
    num_domains: usize,
    student_logits: &Matrix,
    teacher_probs_tau: &ProbBatch,
    cfg: &KdConfig,
) -> Result<GroupLossVector> {
    if labels.len() != student_logits.rows() || domains.len() != labels.len() {
        return Err(shape_err!("labels, domains and logits must have the same number of rows"));
    }
    let groups = crate::data::split_by_domain(domains);
    let mut losses = vec![0.0; num_domains];
    let mut counts = vec![0; num_domains];
    for (d, idx) in groups {
        if d >= num_domains {
            return Err(shape_err!("domain {d} out of range for {num_domains} domains"));
        }
        let sub_labels: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let y = ProbBatch::one_hot(&sub_labels, student_logits.cols())?;
        let z = student_logits.select_rows(&idx)?;
        let p = ProbBatch(teacher_probs_tau.matrix().select_rows(&idx)?);
        losses[d] = kd_loss(&y, &z, &p, cfg)?.0;
        counts[d] = idx.len();
    }
    GroupLossVector::new(losses, counts)
}
