//! The staged training schedule.
//!
//! Epochs `[0, λ)` train the projection and class heads with the
//! classification and contrastive losses only. From epoch `λ` each batch also
//! updates the prototype bank. From epoch `λ + ω` the similarity module is
//! trained with the focal loss as well.

mod checkpoint;
mod optimizer;

pub use checkpoint::{load_checkpoint, parse_checkpoint, render_checkpoint, save_checkpoint};
pub use optimizer::{Optimizer, OptimizerKind};

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::DatasetSplit;
use crate::error::{Error, Result};
use crate::losses::{stage1_loss, stage2_loss, Batch, ContrastiveConfig, FocalConfig, LossConfig};
use crate::numerics::Matrix;
use crate::proto_head::{ModelConfig, ModelState, OodDecisionConfig};

/// Which parts of the method are switched off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    /// No negative-embedding generator.
    NoNegGenerator,
    /// Neither the contrastive loss nor the negative-embedding generator.
    NoContrastiveNoNeg,
}

impl Ablation {
    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoNegGenerator => "no_neg_generator",
            Ablation::NoContrastiveNoNeg => "no_contrastive_no_neg",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Ablation::Full),
            "no_neg_generator" | "no-neg" => Ok(Ablation::NoNegGenerator),
            "no_contrastive_no_neg" | "no-con-no-neg" => Ok(Ablation::NoContrastiveNoNeg),
            other => Err(Error::Config(format!("unknown ablation {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// First epoch that collects prototypes (λ).
    pub lambda_start: usize,
    /// Epochs of collection before the similarity module trains (ω).
    pub omega_gap: usize,
    pub alpha: f64,
    /// Contrastive temperature.
    pub tau: f64,
    /// Negative-weight softmax temperature.
    pub temperature: f64,
    pub focal_exponent: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub ablation: Ablation,
    pub optimizer: OptimizerKind,
    /// Embedding width.
    pub d: usize,
    pub projection_hidden: usize,
    pub similarity_hidden: usize,
    pub relu_before_sigmoid: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            lambda_start: 20,
            omega_gap: 5,
            alpha: 0.9,
            tau: 0.2,
            temperature: 2.0,
            focal_exponent: 2.0,
            batch_size: 64,
            learning_rate: 1e-3,
            seed: 0,
            ablation: Ablation::Full,
            optimizer: OptimizerKind::Adam,
            d: 16,
            projection_hidden: 64,
            similarity_hidden: 64,
            relu_before_sigmoid: false,
        }
    }
}

impl TrainConfig {
    /// The schedule used for Pascal VOC: λ = 40, ω = 5.
    pub fn voc_preset() -> Self {
        Self {
            epochs: 60,
            lambda_start: 40,
            omega_gap: 5,
            ..Self::default()
        }
    }

    /// The schedule used for BDD100K: λ = 25, ω = 5.
    pub fn bdd_preset() -> Self {
        Self {
            epochs: 60,
            lambda_start: 25,
            omega_gap: 5,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda_start + self.omega_gap >= self.epochs {
            return Err(Error::Config(format!(
                "lambda_start + omega_gap ({} + {}) must be less than epochs ({})",
                self.lambda_start, self.omega_gap, self.epochs
            )));
        }
        if self.omega_gap == 0 {
            return Err(Error::Config(
                "omega_gap must be at least 1 so prototypes exist before similarity training"
                    .into(),
            ));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be at least 2, got {}",
                self.batch_size
            )));
        }
        for (name, v) in [
            ("tau", self.tau),
            ("temperature", self.temperature),
            ("learning_rate", self.learning_rate),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} must be positive and finite, got {v}"
                )));
            }
        }
        if !(self.focal_exponent >= 0.0 && self.focal_exponent.is_finite()) {
            return Err(Error::Config(format!(
                "focal_exponent must be non-negative, got {}",
                self.focal_exponent
            )));
        }
        Ok(())
    }

    pub fn model_config(&self, t: usize, h: usize) -> ModelConfig {
        ModelConfig {
            t,
            h,
            d: self.d,
            projection_hidden: self.projection_hidden,
            similarity_hidden: self.similarity_hidden,
            alpha: self.alpha,
            relu_before_sigmoid: self.relu_before_sigmoid,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            contrastive: ContrastiveConfig { tau: self.tau },
            focal: FocalConfig {
                focal_exponent: self.focal_exponent,
            },
            temperature: self.temperature,
            use_contrastive: self.ablation != Ablation::NoContrastiveNoNeg,
            use_negatives: self.ablation == Ablation::Full,
        }
    }

    pub fn stage_of(&self, epoch: usize) -> Stage {
        if epoch < self.lambda_start {
            Stage::Warmup
        } else if epoch < self.lambda_start + self.omega_gap {
            Stage::Collect
        } else {
            Stage::Similarity
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Classification and contrastive losses only.
    Warmup,
    /// As warm-up, plus prototype updates.
    Collect,
    /// Adds the similarity module's focal loss.
    Similarity,
}

/// Batch-mean losses and bank state at the end of one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: Stage,
    pub batches: usize,
    pub total: f64,
    pub classification: f64,
    pub contrastive: f64,
    pub focal: Option<f64>,
    pub degenerate_batches: usize,
    pub bank_norms: Vec<f64>,
    pub seen_categories: usize,
    /// Optimizer steps applied to the similarity module this epoch.
    pub similarity_updates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// Not part of any determinism guarantee.
    pub wall_clock_seconds: f64,
    pub checkpoint: Option<PathBuf>,
}

impl TrainReport {
    /// One JSON object per epoch, newline-terminated.
    pub fn log_lines(&self) -> String {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(e).expect("epoch record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn summary_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

/// Trains a fresh model on the ID records of `split`. Background records
/// become extra focal negatives once the similarity module trains.
pub fn train(split: &DatasetSplit, cfg: &TrainConfig) -> Result<(ModelState, TrainReport)> {
    cfg.validate()?;
    let start = Instant::now();
    let (ids, labels) = split.id_indices();
    if ids.len() < cfg.batch_size {
        return Err(Error::Config(format!(
            "training split has {} ID records, fewer than batch_size {}",
            ids.len(),
            cfg.batch_size
        )));
    }
    let background = split.background_indices();
    let mut state = ModelState::new(
        cfg.model_config(split.t, split.h),
        OodDecisionConfig::default(),
        cfg.seed,
    )?;
    let loss_cfg = cfg.loss_config();
    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.learning_rate)?;
    // Separate stream from the initialisation above.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_ba7c4e5);
    let mut order: Vec<usize> = (0..ids.len()).collect();
    let mut bg_order = background.clone();
    let mut epochs = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let stage = cfg.stage_of(epoch);
        order.shuffle(&mut rng);
        bg_order.shuffle(&mut rng);
        let batches: Vec<&[usize]> = order
            .chunks(cfg.batch_size)
            .filter(|c| c.len() >= 2)
            .collect();
        let bg_per_batch = bg_order.len().div_ceil(batches.len());

        let mut record = EpochRecord {
            epoch,
            stage,
            batches: batches.len(),
            total: 0.0,
            classification: 0.0,
            contrastive: 0.0,
            focal: (stage == Stage::Similarity).then_some(0.0),
            degenerate_batches: 0,
            bank_norms: Vec::new(),
            seen_categories: 0,
            similarity_updates: 0,
        };

        for (b, chunk) in batches.iter().enumerate() {
            let rows: Vec<usize> = chunk.iter().map(|&i| ids[i]).collect();
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let bg_rows: &[usize] = if stage == Stage::Similarity {
                let lo = (b * bg_per_batch).min(bg_order.len());
                let hi = (lo + bg_per_batch).min(bg_order.len());
                &bg_order[lo..hi]
            } else {
                &[]
            };
            let batch = Batch::new(
                split.features(&rows),
                batch_labels,
                if bg_rows.is_empty() {
                    Matrix::zeros(0, split.h)
                } else {
                    split.features(bg_rows)
                },
            )?;

            state.zero_grad();
            let at = |e: Error| match e {
                Error::NonFinite { location } => Error::NonFinite {
                    location: format!("{location} (epoch {epoch}, batch {b})"),
                },
                other => other,
            };
            let out = match stage {
                Stage::Similarity => stage2_loss(&batch, &mut state, &loss_cfg)?,
                _ => stage1_loss(&batch, &mut state, &loss_cfg)?,
            };
            if !out.total.is_finite() {
                return Err(Error::NonFinite {
                    location: format!("training loss (epoch {epoch}, batch {b})"),
                });
            }
            {
                let mut params = state.parameters_mut();
                if stage != Stage::Similarity {
                    // Projection and class heads only.
                    params.truncate(6);
                }
                optimizer.step(&mut params).map_err(at)?;
            }
            if stage != Stage::Warmup {
                state
                    .bank
                    .update(&out.embeddings, &batch.labels)
                    .map_err(at)?;
            }

            record.total += out.total;
            record.classification += out.classification;
            record.contrastive += out.contrastive;
            if let (Some(acc), Some(f)) = (record.focal.as_mut(), out.focal) {
                *acc += f;
            }
            record.degenerate_batches += usize::from(out.contrastive_degenerate);
            record.similarity_updates += usize::from(stage == Stage::Similarity);
        }

        let n = batches.len() as f64;
        record.total /= n;
        record.classification /= n;
        record.contrastive /= n;
        if let Some(f) = record.focal.as_mut() {
            *f /= n;
        }
        record.bank_norms = state.bank.norms();
        record.seen_categories = state.bank.seen_count();
        epochs.push(record);
    }

    let report = TrainReport {
        epochs,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        checkpoint: None,
    };
    Ok((state, report))
}
