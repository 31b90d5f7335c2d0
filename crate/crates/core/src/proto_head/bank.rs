use crate::error::{Error, Result};
use crate::numerics::{norm, Matrix};

/// One prototype per ID category, updated as an exponential moving average
/// of per-batch category means.
///
/// Rows start at zero and stay exactly zero until their category is first
/// observed; `seen` tracks which rows have been updated.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    prototypes: Matrix,
    alpha: f64,
    seen: Vec<bool>,
}

/// The seen prototypes packed into a `k x d` matrix, in ascending category
/// order, together with the category each row belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivePrototypes {
    pub matrix: Matrix,
    pub categories: Vec<usize>,
}

impl ActivePrototypes {
    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    /// Column of `category` in the packed matrix.
    pub fn column_of(&self, category: usize) -> Option<usize> {
        self.categories.binary_search(&category).ok()
    }
}

impl PrototypeBank {
    pub fn new(t: usize, d: usize, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::Config(format!(
                "EMA factor alpha must lie in (0, 1), got {alpha}"
            )));
        }
        Ok(Self {
            prototypes: Matrix::zeros(t, d),
            alpha,
            seen: vec![false; t],
        })
    }

    /// Rebuilds a bank from stored state, checking that unseen rows are zero.
    pub fn from_parts(prototypes: Matrix, alpha: f64, seen: Vec<bool>) -> Result<Self> {
        let mut bank = Self::new(prototypes.rows(), prototypes.cols(), alpha)?;
        if seen.len() != prototypes.rows() {
            return Err(Error::dim(
                "PrototypeBank::from_parts",
                prototypes.rows(),
                seen.len(),
            ));
        }
        for (c, &s) in seen.iter().enumerate() {
            if !s && prototypes.row(c).iter().any(|&v| v != 0.0) {
                return Err(Error::State(format!(
                    "prototype {c} is marked unseen but is not zero"
                )));
            }
        }
        if !prototypes.is_finite() {
            return Err(Error::NonFinite {
                location: "prototype bank".into(),
            });
        }
        bank.prototypes = prototypes;
        bank.seen = seen;
        Ok(bank)
    }

    pub fn categories(&self) -> usize {
        self.prototypes.rows()
    }

    pub fn dim(&self) -> usize {
        self.prototypes.cols()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn prototypes(&self) -> &Matrix {
        &self.prototypes
    }

    pub fn seen(&self) -> &[bool] {
        &self.seen
    }

    pub fn seen_count(&self) -> usize {
        self.seen.iter().filter(|&&s| s).count()
    }

    pub fn norms(&self) -> Vec<f64> {
        self.prototypes.row_iter().map(norm).collect()
    }

    pub fn active(&self) -> ActivePrototypes {
        let categories: Vec<usize> = (0..self.categories()).filter(|&c| self.seen[c]).collect();
        ActivePrototypes {
            matrix: self.prototypes.select_rows(&categories),
            categories,
        }
    }

    /// One EMA step per category present in the batch:
    /// `p_c ← α·p_c + (1 − α)·mean(r_i : l_i = c)`.
    pub fn update(&mut self, embeddings: &Matrix, labels: &[usize]) -> Result<()> {
        if embeddings.rows() != labels.len() {
            return Err(Error::dim(
                "PrototypeBank::update",
                embeddings.rows(),
                labels.len(),
            ));
        }
        if embeddings.cols() != self.dim() {
            return Err(Error::dim(
                "PrototypeBank::update",
                self.dim(),
                embeddings.cols(),
            ));
        }
        let t = self.categories();
        if let Some(&bad) = labels.iter().find(|&&l| l >= t) {
            return Err(Error::Domain(format!(
                "label {bad} is not an ID category (t = {t})"
            )));
        }
        if !embeddings.is_finite() {
            return Err(Error::NonFinite {
                location: "embeddings passed to the prototype update".into(),
            });
        }
        let d = self.dim();
        let mut sums = Matrix::zeros(t, d);
        let mut counts = vec![0usize; t];
        for (i, &l) in labels.iter().enumerate() {
            counts[l] += 1;
            for (s, v) in sums.row_mut(l).iter_mut().zip(embeddings.row(i)) {
                *s += v;
            }
        }
        let alpha = self.alpha;
        for c in 0..t {
            if counts[c] == 0 {
                continue;
            }
            let k = counts[c] as f64;
            let mean: Vec<f64> = sums.row(c).iter().map(|s| s / k).collect();
            for (p, m) in self.prototypes.row_mut(c).iter_mut().zip(&mean) {
                *p = alpha * *p + (1.0 - alpha) * m;
            }
            self.seen[c] = true;
        }
        Ok(())
    }
}
