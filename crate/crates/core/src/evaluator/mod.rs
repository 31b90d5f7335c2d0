//! FPR95 and AUROC under the two evaluation protocols.
//!
//! ID predictions are the positives and scores are oriented "higher = ID".
//! Protocol A keeps every prediction. Protocol B keeps, for each image of
//! the ID dataset, only the `K` predictions with the highest class score,
//! where `K` is the image's annotated object count. OOD-dataset predictions
//! are never filtered.

mod metrics;
mod report;

pub use metrics::{auroc, fpr_at_95_tpr};
pub use report::{
    load_metrics_report, parse_metrics_report, render_metrics_report, save_metrics_report,
    MetricsReport,
};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::datasets::{DatasetSplit, SplitRole};
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::proto_head::{classify_ood, ModelState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    IdDataset,
    OodDataset,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::IdDataset => "id_dataset",
            Source::OodDataset => "ood_dataset",
        }
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Source {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "id_dataset" => Ok(Source::IdDataset),
            "ood_dataset" => Ok(Source::OodDataset),
            other => Err(Error::Format(format!("unknown source {other:?}"))),
        }
    }
}

/// One detector output: class confidence and OOD energy.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredPrediction {
    pub image_id: u64,
    pub source: Source,
    pub cls_score: f64,
    pub ood_score: f64,
    /// `E ≥ γ`, when the producer thresholded the score.
    pub decision: Option<bool>,
}

/// All predictions of one image plus its annotated object count `K`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGroup {
    pub image_id: u64,
    pub source: Source,
    pub annotated_k: usize,
    pub predictions: Vec<ScoredPrediction>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Protocol {
    A,
    B,
}

impl Protocol {
    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::A => "A",
            Protocol::B => "B",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(Protocol::A),
            "B" | "b" => Ok(Protocol::B),
            other => Err(Error::Usage(format!(
                "unknown protocol {other:?} (expected a or b)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Filtered {
    pub predictions: Vec<ScoredPrediction>,
    pub warnings: Vec<String>,
}

pub fn protocol_filter(groups: &[ImageGroup], protocol: Protocol) -> Filtered {
    let mut out = Filtered::default();
    for group in groups {
        if protocol == Protocol::A || group.source == Source::OodDataset {
            out.predictions.extend(group.predictions.iter().cloned());
            continue;
        }
        let k = group.annotated_k;
        if k > group.predictions.len() {
            out.warnings.push(format!(
                "image {}: K = {k} exceeds its {} predictions; keeping all",
                group.image_id,
                group.predictions.len()
            ));
        }
        let mut order: Vec<usize> = (0..group.predictions.len()).collect();
        // Stable, so equal scores keep input order.
        order.sort_by(|&a, &b| {
            group.predictions[b]
                .cls_score
                .total_cmp(&group.predictions[a].cls_score)
        });
        order.truncate(k);
        order.sort_unstable();
        out.predictions
            .extend(order.into_iter().map(|i| group.predictions[i].clone()));
    }
    out
}

/// A metrics report together with any warnings raised by the protocol filter.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub warnings: Vec<String>,
}

/// Metrics over already-scored prediction groups.
pub fn evaluate_groups(groups: &[ImageGroup], protocol: Protocol) -> Result<Evaluation> {
    let filtered = protocol_filter(groups, protocol);
    let (mut id, mut ood) = (Vec::new(), Vec::new());
    for p in &filtered.predictions {
        match p.source {
            Source::IdDataset => id.push(p.ood_score),
            Source::OodDataset => ood.push(p.ood_score),
        }
    }
    let (fpr95, threshold) = fpr_at_95_tpr(&id, &ood)?;
    let auroc = auroc(&id, &ood)?;
    Ok(Evaluation {
        report: MetricsReport {
            protocol,
            fpr95,
            auroc,
            threshold,
            n_id: id.len(),
            n_ood: ood.len(),
        },
        warnings: filtered.warnings,
    })
}

/// Scores every record of both splits and evaluates them under `protocol`.
pub fn evaluate(
    model: &ModelState,
    id_split: &DatasetSplit,
    ood_split: &DatasetSplit,
    protocol: Protocol,
) -> Result<Evaluation> {
    let mut groups = score_split(model, id_split, Source::IdDataset)?;
    groups.extend(score_split(model, ood_split, Source::OodDataset)?);
    evaluate_groups(&groups, protocol)
}

/// Source implied by a split's role.
pub fn source_of(role: SplitRole) -> Source {
    match role {
        SplitRole::OodEval => Source::OodDataset,
        SplitRole::Train | SplitRole::IdEval => Source::IdDataset,
    }
}

/// Scores every record of `split` and groups them by image, in order of
/// first appearance. `K` is the number of annotated records in the image.
pub fn score_split(
    model: &ModelState,
    split: &DatasetSplit,
    source: Source,
) -> Result<Vec<ImageGroup>> {
    if split.h != model.config.h {
        return Err(Error::dim("score_split", model.config.h, split.h));
    }
    let scores = score_features(model, &split.all_features())?;
    let decisions = classify_ood(&scores, &model.decision);

    let mut index: BTreeMap<u64, usize> = BTreeMap::new();
    let mut groups: Vec<ImageGroup> = Vec::new();
    for (i, record) in split.records.iter().enumerate() {
        let g = *index.entry(record.image_id).or_insert_with(|| {
            groups.push(ImageGroup {
                image_id: record.image_id,
                source,
                annotated_k: 0,
                predictions: Vec::new(),
            });
            groups.len() - 1
        });
        let group = &mut groups[g];
        group.annotated_k += usize::from(record.annotated);
        group.predictions.push(ScoredPrediction {
            image_id: record.image_id,
            source,
            cls_score: record.cls_score,
            ood_score: scores[i],
            decision: Some(decisions[i]),
        });
    }
    Ok(groups)
}

/// Worker count for scoring: `PROTO_OOD_THREADS` if set, else the
/// machine's available parallelism.
pub fn thread_count() -> usize {
    std::env::var("PROTO_OOD_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .max(1)
}

/// Energy scores for each row. Rows are scored independently, so the
/// chunking across threads does not change any value.
pub fn score_features(model: &ModelState, features: &Matrix) -> Result<Vec<f64>> {
    let n = features.rows();
    let threads = thread_count().min(n.max(1));
    let chunk = n.div_ceil(threads).max(1);
    let ranges: Vec<(usize, usize)> = (0..n)
        .step_by(chunk)
        .map(|s| (s, (s + chunk).min(n)))
        .collect();
    if ranges.len() <= 1 {
        return Ok(model.score(features)?.scores);
    }
    let parts: Vec<Result<Vec<f64>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = ranges
            .iter()
            .map(|&(a, b)| {
                scope.spawn(move || {
                    let rows: Vec<usize> = (a..b).collect();
                    model.score(&features.select_rows(&rows)).map(|e| e.scores)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("scoring thread panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(n);
    for part in parts {
        out.extend(part?);
    }
    Ok(out)
}
