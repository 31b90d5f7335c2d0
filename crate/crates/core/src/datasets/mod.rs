//! Feature-level data model, the synthetic feature generator and the
//! `.posplit` / `.podump` file formats.

mod dump_io;
mod split_io;
mod synthetic;

pub use dump_io::{
    load_detection_dump, parse_detection_dump, render_detection_dump, save_detection_dump,
};
pub use split_io::{load_split, parse_split, render_split, save_split};
pub use synthetic::{generate_synthetic, SyntheticConfig, SyntheticData};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// What a detected object is, as far as the ground truth knows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ObjectKind {
    /// In-distribution object of category `c < t`.
    Id(usize),
    Ood,
    /// A proposal with no ground-truth object behind it.
    Background,
}

impl ObjectKind {
    pub fn category(self) -> Option<usize> {
        match self {
            ObjectKind::Id(c) => Some(c),
            _ => None,
        }
    }

    pub(crate) fn tag(self) -> &'static str {
        match self {
            ObjectKind::Id(_) => "id",
            ObjectKind::Ood => "ood",
            ObjectKind::Background => "bg",
        }
    }
}

/// One detected object: a query feature plus its ground-truth status.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub image_id: u64,
    pub feature: Vec<f64>,
    pub kind: ObjectKind,
    /// Stand-in for the detector's maximum class score.
    pub cls_score: f64,
    /// True iff the record corresponds to a ground-truth object.
    pub annotated: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitRole {
    Train,
    IdEval,
    OodEval,
}

impl SplitRole {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitRole::Train => "train",
            SplitRole::IdEval => "id_eval",
            SplitRole::OodEval => "ood_eval",
        }
    }

    /// Conventional file name inside a data directory.
    pub fn file_name(self) -> String {
        format!("{}.posplit", self.as_str())
    }
}

impl fmt::Display for SplitRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SplitRole {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitRole::Train),
            "id_eval" => Ok(SplitRole::IdEval),
            "ood_eval" => Ok(SplitRole::OodEval),
            other => Err(Error::Format(format!("unknown split role {other:?}"))),
        }
    }
}

/// An ordered collection of records sharing category count `t` and feature
/// width `h`.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub records: Vec<FeatureRecord>,
    pub t: usize,
    pub h: usize,
    pub role: SplitRole,
}

impl DatasetSplit {
    pub fn new(records: Vec<FeatureRecord>, t: usize, h: usize, role: SplitRole) -> Result<Self> {
        let split = Self {
            records,
            t,
            h,
            role,
        };
        split.validate()?;
        Ok(split)
    }

    pub fn empty(t: usize, h: usize, role: SplitRole) -> Self {
        Self {
            records: Vec::new(),
            t,
            h,
            role,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, r) in self.records.iter().enumerate() {
            if r.feature.len() != self.h {
                return Err(Error::Format(format!(
                    "record {i}: feature width {} but split width is {}",
                    r.feature.len(),
                    self.h
                )));
            }
            if let Some(v) = r.feature.iter().find(|v| !v.is_finite()) {
                return Err(Error::Format(format!(
                    "record {i}: non-finite feature value {v}"
                )));
            }
            if !(0.0..=1.0).contains(&r.cls_score) {
                return Err(Error::Format(format!(
                    "record {i}: cls_score {} outside [0, 1]",
                    r.cls_score
                )));
            }
            match r.kind {
                ObjectKind::Id(c) if c >= self.t => {
                    return Err(Error::Format(format!(
                        "record {i}: category {c} but the split has {} categories",
                        self.t
                    )))
                }
                ObjectKind::Ood if self.role == SplitRole::Train => {
                    return Err(Error::Format(format!(
                        "record {i}: OOD object in a training split"
                    )))
                }
                ObjectKind::Background if r.annotated => {
                    return Err(Error::Format(format!(
                        "record {i}: background records cannot be annotated"
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Indices of in-distribution records with their categories.
    pub fn id_indices(&self) -> (Vec<usize>, Vec<usize>) {
        self.records
            .iter()
            .enumerate()
            .filter_map(|(i, r)| r.kind.category().map(|c| (i, c)))
            .unzip()
    }

    pub fn background_indices(&self) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.kind == ObjectKind::Background)
            .map(|(i, _)| i)
            .collect()
    }

    /// Stacks the features of the given records into an `n x h` matrix.
    pub fn features(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.h);
        for &i in indices {
            data.extend_from_slice(&self.records[i].feature);
        }
        Matrix::from_vec(indices.len(), self.h, data).expect("validated widths")
    }

    pub fn all_features(&self) -> Matrix {
        let all: Vec<usize> = (0..self.records.len()).collect();
        self.features(&all)
    }
}
