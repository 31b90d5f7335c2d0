use rand::Rng;
use serde::{Deserialize, Serialize};

use super::bank::{ActivePrototypes, PrototypeBank};
use crate::error::{Error, Result};
use crate::numerics::{cosine_rows, FinalActivation, Matrix, Mlp2, Mlp2Cache, COSINE_EPS};

/// Learned match score between an embedding and each prototype: a two-layer
/// MLP over the concatenation `[r_i, p_j]` with a sigmoid output.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityModule {
    pub mlp: Mlp2,
}

/// Forward values kept for [`SimilarityModule::backward_logits`].
#[derive(Debug, Clone)]
pub struct SimilarityCache {
    mlp: Mlp2Cache,
    n: usize,
    k: usize,
    d: usize,
    logits: Matrix,
}

impl SimilarityCache {
    /// Pre-sigmoid scores, `n x k`.
    pub fn logits(&self) -> &Matrix {
        &self.logits
    }
}

fn activation(relu_before_sigmoid: bool) -> FinalActivation {
    if relu_before_sigmoid {
        FinalActivation::ReluSigmoid
    } else {
        FinalActivation::Sigmoid
    }
}

impl SimilarityModule {
    /// `relu_before_sigmoid` keeps a ReLU in front of the sigmoid, which pins every
    /// score to `[0.5, 1)`.
    pub fn new<R: Rng + ?Sized>(
        d: usize,
        hidden: usize,
        relu_before_sigmoid: bool,
        rng: &mut R,
    ) -> Self {
        Self {
            mlp: Mlp2::new(
                "similarity",
                2 * d,
                hidden,
                1,
                activation(relu_before_sigmoid),
                rng,
            ),
        }
    }

    pub fn zeros(d: usize, hidden: usize, relu_before_sigmoid: bool) -> Self {
        Self {
            mlp: Mlp2::zeros(
                "similarity",
                2 * d,
                hidden,
                1,
                activation(relu_before_sigmoid),
            ),
        }
    }

    pub fn relu_before_sigmoid(&self) -> bool {
        self.mlp.activation == FinalActivation::ReluSigmoid
    }

    pub fn embedding_dim(&self) -> usize {
        self.mlp.input_width() / 2
    }

    /// Scores `s` (`n x k`) for every embedding against every active prototype.
    pub fn forward(
        &self,
        embeddings: &Matrix,
        active: &ActivePrototypes,
    ) -> Result<(Matrix, SimilarityCache)> {
        let d = self.embedding_dim();
        if embeddings.cols() != d || active.matrix.cols() != d || self.mlp.input_width() != 2 * d {
            return Err(Error::dim(
                "similarity_scores",
                format!("embedding and prototype width {d}"),
                format!(
                    "embeddings {}, prototypes {}",
                    embeddings.cols(),
                    active.matrix.cols()
                ),
            ));
        }
        let n = embeddings.rows();
        let k = active.len();
        let fused = fuse(embeddings, &active.matrix);
        let (out, cache) = self.mlp.forward(&fused)?;
        let scores = Matrix::from_vec(n, k, out.into_data())?;
        let logits = Matrix::from_vec(n, k, cache.logits().data().to_vec())?;
        Ok((
            scores,
            SimilarityCache {
                mlp: cache,
                n,
                k,
                d,
                logits,
            },
        ))
    }

    /// Accumulates parameter gradients from a gradient on the pre-sigmoid
    /// scores and returns the gradient w.r.t. the embeddings. Prototypes are
    /// constants here; they only move through the EMA.
    pub fn backward_logits(
        &mut self,
        grad_logits: &Matrix,
        cache: &SimilarityCache,
    ) -> Result<Matrix> {
        if grad_logits.shape() != (cache.n, cache.k) {
            return Err(Error::Usage(format!(
                "similarity backward: gradient {:?} does not match cached scores {}x{}",
                grad_logits.shape(),
                cache.n,
                cache.k
            )));
        }
        let flat = Matrix::from_vec(cache.n * cache.k, 1, grad_logits.data().to_vec())?;
        let grad_fused = self.mlp.backward_logits(&flat, &cache.mlp)?;
        let mut grad = Matrix::zeros(cache.n, cache.d);
        for i in 0..cache.n {
            let out = grad.row_mut(i);
            for j in 0..cache.k {
                let g = &grad_fused.row(i * cache.k + j)[..cache.d];
                for (o, v) in out.iter_mut().zip(g) {
                    *o += v;
                }
            }
        }
        Ok(grad)
    }
}

/// Row `i·k + j` is `[r_i, p_j]`.
fn fuse(embeddings: &Matrix, prototypes: &Matrix) -> Matrix {
    let (n, d) = embeddings.shape();
    let k = prototypes.rows();
    let mut data = Vec::with_capacity(n * k * 2 * d);
    for i in 0..n {
        for j in 0..k {
            data.extend_from_slice(embeddings.row(i));
            data.extend_from_slice(prototypes.row(j));
        }
    }
    Matrix::from_vec(n * k, 2 * d, data).expect("fused shape")
}

/// Similarity scores against the bank's seen prototypes; columns follow
/// `bank.active().categories`.
pub fn similarity_scores(
    embeddings: &Matrix,
    bank: &PrototypeBank,
    module: &SimilarityModule,
) -> Result<Matrix> {
    Ok(module.forward(embeddings, &bank.active())?.0)
}

/// How per-category energies collapse into one score per object.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnergyReduction {
    #[default]
    MaxOverCategories,
    /// Energy at the category predicted by the classification head.
    AtPredictedCategory,
}

impl EnergyReduction {
    pub fn as_str(self) -> &'static str {
        match self {
            EnergyReduction::MaxOverCategories => "max_over_categories",
            EnergyReduction::AtPredictedCategory => "at_predicted_category",
        }
    }
}

impl std::str::FromStr for EnergyReduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max_over_categories" | "max" => Ok(EnergyReduction::MaxOverCategories),
            "at_predicted_category" | "predicted" => Ok(EnergyReduction::AtPredictedCategory),
            other => Err(Error::Config(format!("unknown energy reduction {other:?}"))),
        }
    }
}

/// ID threshold on the energy and the reduction that produces it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OodDecisionConfig {
    pub gamma: f64,
    pub reduction: EnergyReduction,
}

impl Default for OodDecisionConfig {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            reduction: EnergyReduction::MaxOverCategories,
        }
    }
}

impl OodDecisionConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.gamma.is_finite() {
            return Err(Error::Config(format!(
                "gamma must be finite, got {}",
                self.gamma
            )));
        }
        Ok(())
    }
}

/// Per-object energies with the per-category matrix they were reduced from.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyScores {
    /// `E_{i,c} = exp(cos(r_i, p_c)) · s_{i,c}`, `n x k` over seen categories.
    pub per_category: Matrix,
    pub categories: Vec<usize>,
    pub scores: Vec<f64>,
}

/// Elementwise `exp(W) · s`.
pub fn energy_from_parts(cosine: &Matrix, scores: &Matrix) -> Result<Matrix> {
    if !cosine.same_shape(scores) {
        return Err(Error::dim(
            "energy_from_parts",
            format!("{:?}", cosine.shape()),
            format!("{:?}", scores.shape()),
        ));
    }
    let data = cosine
        .data()
        .iter()
        .zip(scores.data())
        .map(|(w, s)| w.exp() * s)
        .collect();
    Matrix::from_vec(cosine.rows(), cosine.cols(), data)
}

/// OOD energy for each embedding; higher means more in-distribution.
///
/// `predicted` supplies one category per row and is required for
/// [`EnergyReduction::AtPredictedCategory`].
pub fn ood_energy(
    embeddings: &Matrix,
    bank: &PrototypeBank,
    module: &SimilarityModule,
    reduction: EnergyReduction,
    predicted: Option<&[usize]>,
) -> Result<EnergyScores> {
    let active = bank.active();
    if active.is_empty() {
        return Err(Error::State(
            "no prototype has been collected; the model cannot score objects yet".into(),
        ));
    }
    let (s, _) = module.forward(embeddings, &active)?;
    let cosine = cosine_rows(embeddings, &active.matrix, COSINE_EPS)?;
    let per_category = energy_from_parts(&cosine, &s)?;
    let scores = match reduction {
        EnergyReduction::MaxOverCategories => per_category
            .row_iter()
            .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect(),
        EnergyReduction::AtPredictedCategory => {
            let predicted = predicted.ok_or_else(|| {
                Error::Usage("at_predicted_category reduction needs predicted categories".into())
            })?;
            if predicted.len() != embeddings.rows() {
                return Err(Error::dim("ood_energy", embeddings.rows(), predicted.len()));
            }
            predicted
                .iter()
                .enumerate()
                .map(|(i, &c)| {
                    active
                        .column_of(c)
                        .map(|j| per_category.get(i, j))
                        .ok_or_else(|| {
                            Error::State(format!("predicted category {c} has no prototype"))
                        })
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    Ok(EnergyScores {
        per_category,
        categories: active.categories,
        scores,
    })
}

/// `g_i = E_i ≥ γ`: true means the object is judged in-distribution.
pub fn classify_ood(energies: &[f64], cfg: &OodDecisionConfig) -> Vec<bool> {
    energies.iter().map(|&e| e >= cfg.gamma).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seeded_bank(rng: &mut ChaCha8Rng, t: usize, d: usize) -> PrototypeBank {
        let mut bank = PrototypeBank::new(t, d, 0.5).unwrap();
        let data = (0..t * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let labels: Vec<usize> = (0..t).collect();
        bank.update(&Matrix::from_vec(t, d, data).unwrap(), &labels)
            .unwrap();
        bank
    }

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_vec(
            r,
            c,
            (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn zero_module_scores_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bank = seeded_bank(&mut rng, 3, 4);
        let module = SimilarityModule::zeros(4, 8, false);
        let s = similarity_scores(&random_matrix(&mut rng, 5, 4), &bank, &module).unwrap();
        assert_eq!(s.shape(), (5, 3));
        assert!(s.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn permuting_prototypes_permutes_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let module = SimilarityModule::new(3, 6, false, &mut rng);
        let p = random_matrix(&mut rng, 4, 3);
        let r = random_matrix(&mut rng, 5, 3);
        let perm = [2, 0, 3, 1];
        let a = ActivePrototypes {
            matrix: p.clone(),
            categories: vec![0, 1, 2, 3],
        };
        let b = ActivePrototypes {
            matrix: p.select_rows(&perm),
            categories: vec![0, 1, 2, 3],
        };
        let (sa, _) = module.forward(&r, &a).unwrap();
        let (sb, _) = module.forward(&r, &b).unwrap();
        for i in 0..5 {
            for (j, &pj) in perm.iter().enumerate() {
                assert_eq!(sb.get(i, j), sa.get(i, pj));
            }
        }
    }

    #[test]
    fn relu_before_sigmoid_never_drops_below_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let module = SimilarityModule::new(3, 6, true, &mut rng);
        let bank = seeded_bank(&mut rng, 4, 3);
        let s = similarity_scores(&random_matrix(&mut rng, 50, 3), &bank, &module).unwrap();
        assert!(s.data().iter().all(|&v| (0.5..1.0).contains(&v)));
    }

    #[test]
    fn width_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bank = seeded_bank(&mut rng, 2, 4);
        let module = SimilarityModule::zeros(3, 4, false);
        assert!(matches!(
            similarity_scores(&Matrix::zeros(1, 4), &bank, &module),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn energy_examples() {
        let w = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let s = Matrix::from_rows(&[[1.0, 0.5]]).unwrap();
        let e = energy_from_parts(&w, &s).unwrap();
        assert!((e.get(0, 0) - std::f64::consts::E).abs() < 1e-15);
        assert_eq!(e.get(0, 1), 0.5);
    }

    #[test]
    fn max_reduction_dominates_and_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let module = SimilarityModule::new(3, 6, false, &mut rng);
        let bank = seeded_bank(&mut rng, 4, 3);
        let r = random_matrix(&mut rng, 6, 3);
        let e = ood_energy(&r, &bank, &module, EnergyReduction::MaxOverCategories, None).unwrap();
        for i in 0..6 {
            assert!(e.per_category.row(i).iter().all(|&v| e.scores[i] >= v));
            assert!(e
                .per_category
                .row(i)
                .iter()
                .all(|&v| v > 0.0 && v < std::f64::consts::E));
        }
        let perm = [3, 1, 0, 2];
        let permuted =
            PrototypeBank::from_parts(bank.prototypes().select_rows(&perm), 0.5, vec![true; 4])
                .unwrap();
        let e2 = ood_energy(
            &r,
            &permuted,
            &module,
            EnergyReduction::MaxOverCategories,
            None,
        )
        .unwrap();
        assert_eq!(e.scores, e2.scores);
    }

    #[test]
    fn predicted_reduction_picks_the_column() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let module = SimilarityModule::new(3, 6, false, &mut rng);
        let bank = seeded_bank(&mut rng, 4, 3);
        let r = random_matrix(&mut rng, 2, 3);
        let e = ood_energy(
            &r,
            &bank,
            &module,
            EnergyReduction::AtPredictedCategory,
            Some(&[2, 0]),
        )
        .unwrap();
        assert_eq!(
            e.scores,
            vec![e.per_category.get(0, 2), e.per_category.get(1, 0)]
        );
        assert!(ood_energy(
            &r,
            &bank,
            &module,
            EnergyReduction::AtPredictedCategory,
            None
        )
        .is_err());
    }

    #[test]
    fn empty_bank_cannot_score() {
        let bank = PrototypeBank::new(2, 3, 0.9).unwrap();
        let module = SimilarityModule::zeros(3, 4, false);
        assert!(matches!(
            ood_energy(
                &Matrix::zeros(1, 3),
                &bank,
                &module,
                EnergyReduction::MaxOverCategories,
                None
            ),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn threshold_is_inclusive() {
        let cfg = OodDecisionConfig {
            gamma: 1.25,
            ..Default::default()
        };
        assert_eq!(
            classify_ood(&[1.25, 1.25 - 1e-12, 2.0], &cfg),
            vec![true, false, true]
        );
        assert!(classify_ood(&[], &cfg).is_empty());
    }
}
