//! The OOD head: projection head, prototype bank, similarity module,
//! negative-embedding generator and energy scoring.
//!
//! An object's query feature `q` (width `h`) is projected to an embedding
//! `r` (width `d < h`). Each ID category keeps a prototype `p_c`, an EMA of
//! batch means of its embeddings. The similarity module scores every
//! `(r, p_c)` pair, and the energy `E = exp(cos(r, p_c)) · s` turns that into
//! an ID-ness score: objects with `E ≥ γ` are kept as in-distribution.

mod bank;
mod negatives;
mod similarity;

pub use bank::{ActivePrototypes, PrototypeBank};
pub use negatives::{generate_negatives, negative_weights, NegativeCache, NegativeGenerator};
pub use similarity::{
    classify_ood, energy_from_parts, ood_energy, similarity_scores, EnergyReduction, EnergyScores,
    OodDecisionConfig, SimilarityCache, SimilarityModule,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{FinalActivation, Linear, Matrix, Mlp2, Mlp2Cache, Parameter};

/// Two-layer MLP mapping query features (`h`) to embeddings (`d < h`).
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    pub mlp: Mlp2,
}

impl ProjectionHead {
    pub fn new<R: Rng + ?Sized>(h: usize, hidden: usize, d: usize, rng: &mut R) -> Result<Self> {
        check_dims(h, d)?;
        Ok(Self {
            mlp: Mlp2::new("projection", h, hidden, d, FinalActivation::None, rng),
        })
    }

    pub fn zeros(h: usize, hidden: usize, d: usize) -> Result<Self> {
        check_dims(h, d)?;
        Ok(Self {
            mlp: Mlp2::zeros("projection", h, hidden, d, FinalActivation::None),
        })
    }

    pub fn from_mlp(mlp: Mlp2) -> Result<Self> {
        check_dims(mlp.input_width(), mlp.output_width())?;
        if mlp.activation != FinalActivation::None {
            return Err(Error::Config(
                "projection head must have no output activation".into(),
            ));
        }
        Ok(Self { mlp })
    }

    pub fn input_width(&self) -> usize {
        self.mlp.input_width()
    }

    pub fn output_width(&self) -> usize {
        self.mlp.output_width()
    }

    pub fn forward(&self, features: &Matrix) -> Result<(Matrix, Mlp2Cache)> {
        self.mlp.forward(features)
    }

    pub fn backward(&mut self, grad: &Matrix, cache: &Mlp2Cache) -> Result<Matrix> {
        self.mlp.backward(grad, cache)
    }
}

fn check_dims(h: usize, d: usize) -> Result<()> {
    if d == 0 || d >= h {
        return Err(Error::Config(format!(
            "embedding width d must satisfy 0 < d < h (d = {d}, h = {h})"
        )));
    }
    Ok(())
}

/// Embeddings `r` for a batch of query features.
pub fn project(features: &Matrix, head: &ProjectionHead) -> Result<Matrix> {
    Ok(head.forward(features)?.0)
}

/// Shapes and fixed hyperparameters of a [`ModelState`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub t: usize,
    pub h: usize,
    pub d: usize,
    pub projection_hidden: usize,
    pub similarity_hidden: usize,
    /// EMA factor of the prototype bank.
    pub alpha: f64,
    /// Use `Sigmoid(ReLU(·))` at the similarity output instead of a plain sigmoid.
    pub relu_before_sigmoid: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            t: 5,
            h: 64,
            d: 16,
            projection_hidden: 64,
            similarity_hidden: 64,
            alpha: 0.9,
            relu_before_sigmoid: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t < 2 {
            return Err(Error::Config(format!(
                "t must be at least 2, got {}",
                self.t
            )));
        }
        check_dims(self.h, self.d)?;
        if self.projection_hidden == 0 || self.similarity_hidden == 0 {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!(
                "alpha must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// Everything needed to score objects: the trainable heads, the prototype
/// bank and the decision rule.
///
/// `classifier` is a linear class head on the query features. It stands in
/// for the detector's own classification branch and supplies predicted
/// categories for [`EnergyReduction::AtPredictedCategory`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub projection: ProjectionHead,
    pub classifier: Linear,
    pub similarity: SimilarityModule,
    pub bank: PrototypeBank,
    pub decision: OodDecisionConfig,
}

impl ModelState {
    pub fn new(config: ModelConfig, decision: OodDecisionConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        decision.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let projection =
            ProjectionHead::new(config.h, config.projection_hidden, config.d, &mut rng)?;
        let classifier = Linear::init("classifier", config.h, config.t, 3.0, &mut rng);
        let similarity = SimilarityModule::new(
            config.d,
            config.similarity_hidden,
            config.relu_before_sigmoid,
            &mut rng,
        );
        let bank = PrototypeBank::new(config.t, config.d, config.alpha)?;
        Ok(Self {
            config,
            projection,
            classifier,
            similarity,
            bank,
            decision,
        })
    }

    /// Trainable parameters in a fixed order: projection, classifier, similarity.
    pub fn parameters(&self) -> Vec<&Parameter> {
        let mut out: Vec<&Parameter> = self.projection.mlp.parameters().into_iter().collect();
        out.extend(self.classifier.parameters());
        out.extend(self.similarity.mlp.parameters());
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out: Vec<&mut Parameter> =
            self.projection.mlp.parameters_mut().into_iter().collect();
        out.extend(self.classifier.parameters_mut());
        out.extend(self.similarity.mlp.parameters_mut());
        out
    }

    pub fn zero_grad(&mut self) {
        self.parameters_mut()
            .into_iter()
            .for_each(Parameter::zero_grad);
    }

    pub fn embed(&self, features: &Matrix) -> Result<Matrix> {
        project(features, &self.projection)
    }

    /// Argmax of the class head for each row.
    pub fn predict_categories(&self, features: &Matrix) -> Result<Vec<usize>> {
        let logits = self.classifier.forward(features)?;
        Ok(logits
            .row_iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (c, &v)| {
                        if v > best.1 {
                            (c, v)
                        } else {
                            best
                        }
                    })
                    .0
            })
            .collect())
    }

    /// Energy scores for raw query features under the configured reduction.
    pub fn score(&self, features: &Matrix) -> Result<EnergyScores> {
        let r = self.embed(features)?;
        let predicted = match self.decision.reduction {
            EnergyReduction::AtPredictedCategory => Some(self.predict_categories(features)?),
            EnergyReduction::MaxOverCategories => None,
        };
        ood_energy(
            &r,
            &self.bank,
            &self.similarity,
            self.decision.reduction,
            predicted.as_deref(),
        )
    }
}
