//! Training objectives with analytic gradients.
//!
//! Every loss returns its value together with the gradient of that value
//! with respect to its matrix input; composite stage losses additionally
//! accumulate parameter gradients into a [`ModelState`](crate::proto_head::ModelState).

mod stage;

pub use stage::{stage1_loss, stage2_loss, Batch, LossConfig, StageLoss};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{l2_normalize_rows, sigmoid, softplus, Matrix, NORM_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContrastiveConfig {
    /// Scaling factor dividing the cosine similarities.
    pub tau: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self { tau: 0.2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FocalConfig {
    pub focal_exponent: f64,
}

impl Default for FocalConfig {
    fn default() -> Self {
        Self {
            focal_exponent: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveLoss {
    pub loss: f64,
    /// Gradient w.r.t. the raw (unnormalised) embeddings.
    pub grad: Matrix,
    /// Anchors that had at least one same-category partner.
    pub anchors: usize,
    /// Set when no anchor qualified; the loss and gradient are then zero.
    pub degenerate: bool,
}

/// Supervised contrastive loss over L2-normalised embeddings.
///
/// For anchor `i` with partners `P(i) = {j ≠ i : l_j = l_i}`:
/// `f_i = −log( Σ_{j∈P(i)} exp(z_i·z_j/τ) / Σ_{j≠i} exp(z_i·z_j/τ) )`.
/// Anchors with an empty `P(i)` are skipped and the mean runs over the rest.
pub fn contrastive_loss(
    embeddings: &Matrix,
    labels: &[usize],
    cfg: &ContrastiveConfig,
) -> Result<ContrastiveLoss> {
    if embeddings.rows() != labels.len() {
        return Err(Error::dim(
            "contrastive_loss",
            embeddings.rows(),
            labels.len(),
        ));
    }
    if !(cfg.tau > 0.0 && cfg.tau.is_finite()) {
        return Err(Error::Domain(format!(
            "tau must be positive, got {}",
            cfg.tau
        )));
    }
    let n = embeddings.rows();
    let normalized = l2_normalize_rows(embeddings, NORM_EPS);
    let z = &normalized.matrix;
    let inv_tau = 1.0 / cfg.tau;

    let valid: Vec<bool> = (0..n)
        .map(|i| (0..n).any(|j| j != i && labels[j] == labels[i]))
        .collect();
    let anchors = valid.iter().filter(|&&v| v).count();
    if anchors == 0 {
        return Ok(ContrastiveLoss {
            loss: 0.0,
            grad: Matrix::zeros(n, embeddings.cols()),
            anchors: 0,
            degenerate: true,
        });
    }
    let m = anchors as f64;

    let mut sim = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            sim.set(i, j, crate::numerics::dot(z.row(i), z.row(j)) * inv_tau);
        }
    }

    let mut loss = 0.0;
    // coeff(i, j) = ∂L/∂sim(i, j)
    let mut coeff = Matrix::zeros(n, n);
    for i in (0..n).filter(|&i| valid[i]) {
        let others = (0..n).filter(|&j| j != i);
        let lse_all = log_sum_exp(others.clone().map(|j| sim.get(i, j)));
        let lse_pos = log_sum_exp(
            others
                .clone()
                .filter(|&j| labels[j] == labels[i])
                .map(|j| sim.get(i, j)),
        );
        loss += lse_all - lse_pos;
        for j in others {
            let mut c = (sim.get(i, j) - lse_all).exp();
            if labels[j] == labels[i] {
                c -= (sim.get(i, j) - lse_pos).exp();
            }
            coeff.set(i, j, c / m);
        }
    }

    let d = embeddings.cols();
    let mut grad_z = Matrix::zeros(n, d);
    for i in 0..n {
        for j in 0..n {
            let c = (coeff.get(i, j) + coeff.get(j, i)) * inv_tau;
            if c == 0.0 {
                continue;
            }
            let zj = z.row(j).to_vec();
            for (g, v) in grad_z.row_mut(i).iter_mut().zip(&zj) {
                *g += c * v;
            }
        }
    }

    let mut grad = grad_z;
    for i in 0..n {
        if normalized.degenerate[i] {
            continue;
        }
        let zi = z.row(i);
        let radial = crate::numerics::dot(zi, grad.row(i));
        let inv_norm = 1.0 / normalized.norms[i];
        let zi = zi.to_vec();
        for (g, v) in grad.row_mut(i).iter_mut().zip(&zi) {
            *g = (*g - radial * v) * inv_norm;
        }
    }

    Ok(ContrastiveLoss {
        loss: loss / m,
        grad,
        anchors,
        degenerate: false,
    })
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn check_targets(op: &'static str, input: &Matrix, targets: &Matrix) -> Result<()> {
    if !input.same_shape(targets) {
        return Err(Error::dim(
            op,
            format!("{:?}", input.shape()),
            format!("{:?}", targets.shape()),
        ));
    }
    if let Some(y) = targets.data().iter().find(|&&y| y != 0.0 && y != 1.0) {
        return Err(Error::Domain(format!(
            "{op}: targets must be 0 or 1, found {y}"
        )));
    }
    Ok(())
}

fn check_exponent(cfg: &FocalConfig) -> Result<()> {
    if !(cfg.focal_exponent >= 0.0 && cfg.focal_exponent.is_finite()) {
        return Err(Error::Domain(format!(
            "focal exponent must be finite and non-negative, got {}",
            cfg.focal_exponent
        )));
    }
    Ok(())
}

/// Mean focal loss over probabilities `p ∈ (0, 1)`:
/// `−(1−p)^γ·ln p` where `y = 1`, `−p^γ·ln(1−p)` where `y = 0`.
pub fn focal_loss(probs: &Matrix, targets: &Matrix, cfg: &FocalConfig) -> Result<(f64, Matrix)> {
    check_targets("focal_loss", probs, targets)?;
    check_exponent(cfg)?;
    if let Some(p) = probs.data().iter().find(|&&p| !(p > 0.0 && p < 1.0)) {
        return Err(Error::Domain(format!(
            "focal_loss: probability {p} outside (0, 1)"
        )));
    }
    let gamma = cfg.focal_exponent;
    let count = probs.data().len().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(probs.rows(), probs.cols());
    for ((g, &p), &y) in grad
        .data_mut()
        .iter_mut()
        .zip(probs.data())
        .zip(targets.data())
    {
        // With y = 0 the loss is the y = 1 loss evaluated at 1 − p.
        let (q, sign) = if y == 1.0 { (p, 1.0) } else { (1.0 - p, -1.0) };
        let w = (1.0 - q).powf(gamma);
        loss -= w * q.ln();
        let dw = if gamma == 0.0 {
            0.0
        } else {
            gamma * (1.0 - q).powf(gamma - 1.0)
        };
        *g = sign * (dw * q.ln() - w / q) / count;
    }
    Ok((loss / count, grad))
}

/// Focal loss evaluated from pre-sigmoid logits. Equal to
/// `focal_loss(sigmoid(x), y)` but stays finite when the sigmoid saturates;
/// the returned gradient is w.r.t. the logits.
pub fn focal_loss_with_logits(
    logits: &Matrix,
    targets: &Matrix,
    cfg: &FocalConfig,
) -> Result<(f64, Matrix)> {
    check_targets("focal_loss_with_logits", logits, targets)?;
    check_exponent(cfg)?;
    let count = logits.data().len().max(1) as f64;
    let (sum, mut grad) = focal_sum_with_logits(logits, targets, cfg.focal_exponent);
    grad.scale(1.0 / count);
    Ok((sum / count, grad))
}

/// Summed (not averaged) logit-space focal loss and its gradient.
pub(crate) fn focal_sum_with_logits(
    logits: &Matrix,
    targets: &Matrix,
    gamma: f64,
) -> (f64, Matrix) {
    let mut sum = 0.0;
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    for ((g, &x), &y) in grad
        .data_mut()
        .iter_mut()
        .zip(logits.data())
        .zip(targets.data())
    {
        // Flip the sign of the logit for y = 0 so both cases read as y = 1.
        let (u, sign) = if y == 1.0 { (x, 1.0) } else { (-x, -1.0) };
        let q = sigmoid(u);
        let one_minus_q = sigmoid(-u);
        let log_q = -softplus(-u);
        let w = one_minus_q.powf(gamma);
        sum -= w * log_q;
        // d/du [−(1−q)^γ ln q] with dq/du = q(1−q)
        let d = gamma * q * w * log_q - w * one_minus_q;
        *g = sign * d;
    }
    (sum, grad)
}

/// Binary cross-entropy, the `γ = 0` case of the focal loss.
pub fn binary_cross_entropy(probs: &Matrix, targets: &Matrix) -> Result<f64> {
    check_targets("binary_cross_entropy", probs, targets)?;
    let count = probs.data().len().max(1) as f64;
    let sum: f64 = probs
        .data()
        .iter()
        .zip(targets.data())
        .map(|(&p, &y)| -(y * p.ln() + (1.0 - y) * (1.0 - p).ln()))
        .sum();
    Ok(sum / count)
}

/// Mean softmax cross-entropy; gradient is w.r.t. the logits.
pub fn classification_loss(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    if logits.rows() != labels.len() {
        return Err(Error::dim(
            "classification_loss",
            logits.rows(),
            labels.len(),
        ));
    }
    let t = logits.cols();
    if let Some(&bad) = labels.iter().find(|&&l| l >= t) {
        return Err(Error::Domain(format!(
            "label {bad} is not an ID category (t = {t})"
        )));
    }
    let n = logits.rows().max(1) as f64;
    let mut grad = crate::numerics::softmax_rows(logits);
    let mut loss = 0.0;
    for (i, &l) in labels.iter().enumerate() {
        let row = logits.row(i);
        let lse = log_sum_exp(row.iter().copied());
        loss += lse - row[l];
        grad.row_mut(i)[l] -= 1.0;
    }
    grad.scale(1.0 / n);
    Ok((loss / n, grad))
}
