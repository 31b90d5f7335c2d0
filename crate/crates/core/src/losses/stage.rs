use serde::{Deserialize, Serialize};

use super::{
    classification_loss, contrastive_loss, focal_sum_with_logits, ContrastiveConfig, FocalConfig,
};
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::proto_head::{ModelState, NegativeGenerator};

/// One training batch: ID query features with labels, plus background
/// proposals that only serve as similarity negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub background: Matrix,
}

impl Batch {
    pub fn new(features: Matrix, labels: Vec<usize>, background: Matrix) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::dim("Batch::new", features.rows(), labels.len()));
        }
        if background.cols() != features.cols() && background.rows() > 0 {
            return Err(Error::dim("Batch::new", features.cols(), background.cols()));
        }
        Ok(Self {
            features,
            labels,
            background,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub contrastive: ContrastiveConfig,
    pub focal: FocalConfig,
    /// Softmax temperature of the negative-embedding weights.
    pub temperature: f64,
    pub use_contrastive: bool,
    pub use_negatives: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            contrastive: ContrastiveConfig::default(),
            focal: FocalConfig::default(),
            temperature: 2.0,
            use_contrastive: true,
            use_negatives: true,
        }
    }
}

/// Loss components of one batch. `total` is the exact sum of the others.
#[derive(Debug, Clone, PartialEq)]
pub struct StageLoss {
    pub total: f64,
    pub classification: f64,
    pub contrastive: f64,
    /// Similarity-module focal loss; `None` in stage 1.
    pub focal: Option<f64>,
    /// The contrastive term had no valid anchor in this batch.
    pub contrastive_degenerate: bool,
    /// Embeddings of the batch's ID features from this forward pass.
    pub embeddings: Matrix,
}

/// Classification surrogate plus contrastive loss. Gradients are added to
/// the projection head and class head of `state`.
pub fn stage1_loss(batch: &Batch, state: &mut ModelState, cfg: &LossConfig) -> Result<StageLoss> {
    let (parts, grad_r, cache) = shared_terms(batch, state, cfg)?;
    state.projection.backward(&grad_r, &cache)?;
    Ok(parts)
}

/// Stage-1 terms plus the focal loss of the similarity module.
///
/// Targets: `(r_i, p_{l_i})` → 1, `(r_i, p_j)` for `j ≠ l_i` → 0, every
/// negative embedding against every prototype → 0 (when `use_negatives`),
/// every background embedding against every prototype → 0. The focal term
/// is the mean over all of these pairs.
pub fn stage2_loss(batch: &Batch, state: &mut ModelState, cfg: &LossConfig) -> Result<StageLoss> {
    let (mut parts, mut grad_r, cache) = shared_terms(batch, state, cfg)?;
    let active = state.bank.active();
    if active.is_empty() {
        return Err(Error::State(
            "stage 2 needs at least one collected prototype".into(),
        ));
    }
    let r = parts.embeddings.clone();
    let k = active.len();
    let gamma = cfg.focal.focal_exponent;

    let mut positive_targets = Matrix::zeros(r.rows(), k);
    for (i, &l) in batch.labels.iter().enumerate() {
        if let Some(j) = active.column_of(l) {
            positive_targets.set(i, j, 1.0);
        }
    }
    let (_, id_cache) = state.similarity.forward(&r, &active)?;
    let (id_sum, id_grad) = focal_sum_with_logits(id_cache.logits(), &positive_targets, gamma);

    let negatives = if cfg.use_negatives {
        let (neg, neg_cache) = NegativeGenerator::forward(&r, &active, cfg.temperature)?;
        let (_, sim_cache) = state.similarity.forward(&neg, &active)?;
        let zeros = Matrix::zeros(neg.rows(), k);
        let (sum, grad) = focal_sum_with_logits(sim_cache.logits(), &zeros, gamma);
        Some((sum, grad, neg_cache, sim_cache))
    } else {
        None
    };

    let background = if batch.background.rows() > 0 {
        let (rb, proj_cache) = state.projection.forward(&batch.background)?;
        let (_, sim_cache) = state.similarity.forward(&rb, &active)?;
        let zeros = Matrix::zeros(rb.rows(), k);
        let (sum, grad) = focal_sum_with_logits(sim_cache.logits(), &zeros, gamma);
        Some((sum, grad, proj_cache, sim_cache))
    } else {
        None
    };

    let pairs = k
        * (r.rows()
            + negatives.as_ref().map_or(0, |n| n.1.rows())
            + background.as_ref().map_or(0, |b| b.1.rows()));
    let scale = 1.0 / pairs.max(1) as f64;
    let mut focal_sum = id_sum;

    let mut g = id_grad;
    g.scale(scale);
    grad_r.add_assign(&state.similarity.backward_logits(&g, &id_cache)?)?;

    if let Some((sum, mut g, neg_cache, sim_cache)) = negatives {
        focal_sum += sum;
        g.scale(scale);
        let grad_neg = state.similarity.backward_logits(&g, &sim_cache)?;
        grad_r.add_assign(&NegativeGenerator::backward(&grad_neg, &neg_cache)?)?;
    }
    if let Some((sum, mut g, proj_cache, sim_cache)) = background {
        focal_sum += sum;
        g.scale(scale);
        let grad_rb = state.similarity.backward_logits(&g, &sim_cache)?;
        state.projection.backward(&grad_rb, &proj_cache)?;
    }
    state.projection.backward(&grad_r, &cache)?;

    let focal = focal_sum * scale;
    parts.focal = Some(focal);
    parts.total = parts.classification + parts.contrastive + focal;
    Ok(parts)
}

fn shared_terms(
    batch: &Batch,
    state: &mut ModelState,
    cfg: &LossConfig,
) -> Result<(StageLoss, Matrix, crate::numerics::Mlp2Cache)> {
    if batch.features.rows() != batch.labels.len() {
        return Err(Error::dim(
            "stage loss",
            batch.features.rows(),
            batch.labels.len(),
        ));
    }
    let logits = state.classifier.forward(&batch.features)?;
    let (classification, grad_logits) = classification_loss(&logits, &batch.labels)?;
    state.classifier.backward(&batch.features, &grad_logits)?;

    let (r, cache) = state.projection.forward(&batch.features)?;
    let (contrastive, degenerate, grad_r) = if cfg.use_contrastive {
        let out = contrastive_loss(&r, &batch.labels, &cfg.contrastive)?;
        (out.loss, out.degenerate, out.grad)
    } else {
        (0.0, false, Matrix::zeros(r.rows(), r.cols()))
    };
    Ok((
        StageLoss {
            total: classification + contrastive,
            classification,
            contrastive,
            focal: None,
            contrastive_degenerate: degenerate,
            embeddings: r,
        },
        grad_r,
        cache,
    ))
}
