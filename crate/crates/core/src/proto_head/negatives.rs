//! Negative-embedding synthesis: each embedding is pushed along a
//! softmax-weighted mix of the prototypes it is *least* similar to.

use super::bank::{ActivePrototypes, PrototypeBank};
use crate::error::{Error, Result};
use crate::numerics::{cosine_rows, cosine_rows_backward, softmax_rows, Matrix, COSINE_EPS};

/// `C = softmax_rows((1 − W) / T)`.
pub fn negative_weights(similarity: &Matrix, temperature: f64) -> Result<Matrix> {
    check_temperature(temperature)?;
    Ok(softmax_rows(&similarity.map(|w| (1.0 - w) / temperature)))
}

fn check_temperature(temperature: f64) -> Result<()> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Domain(format!(
            "temperature must be positive and finite, got {temperature}"
        )));
    }
    Ok(())
}

/// `r′_i = r_i + Σ_j C_ij · p_j` over the seen prototypes.
pub fn generate_negatives(
    embeddings: &Matrix,
    bank: &PrototypeBank,
    temperature: f64,
) -> Result<Matrix> {
    let active = bank.active();
    Ok(NegativeGenerator::forward(embeddings, &active, temperature)?.0)
}

/// Forward values needed to differentiate the negatives w.r.t. `r`.
#[derive(Debug, Clone)]
pub struct NegativeCache {
    embeddings: Matrix,
    prototypes: Matrix,
    weights: Matrix,
    temperature: f64,
}

impl NegativeCache {
    pub fn weights(&self) -> &Matrix {
        &self.weights
    }
}

pub struct NegativeGenerator;

impl NegativeGenerator {
    pub fn forward(
        embeddings: &Matrix,
        active: &ActivePrototypes,
        temperature: f64,
    ) -> Result<(Matrix, NegativeCache)> {
        check_temperature(temperature)?;
        if active.is_empty() {
            return Err(Error::State(
                "no prototype has been collected yet; negatives need at least one".into(),
            ));
        }
        let p = &active.matrix;
        if embeddings.cols() != p.cols() {
            return Err(Error::dim(
                "generate_negatives",
                p.cols(),
                embeddings.cols(),
            ));
        }
        let similarity = cosine_rows(embeddings, p, COSINE_EPS)?;
        let weights = negative_weights(&similarity, temperature)?;
        let mut out = embeddings.clone();
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            for j in 0..p.rows() {
                let c = weights.get(i, j);
                for (o, v) in row.iter_mut().zip(p.row(j)) {
                    *o += c * v;
                }
            }
        }
        let cache = NegativeCache {
            embeddings: embeddings.clone(),
            prototypes: p.clone(),
            weights,
            temperature,
        };
        Ok((out, cache))
    }

    /// Gradient w.r.t. the input embeddings given the gradient w.r.t. the
    /// negatives. Prototypes are treated as constants.
    pub fn backward(upstream: &Matrix, cache: &NegativeCache) -> Result<Matrix> {
        if !upstream.same_shape(&cache.embeddings) {
            return Err(Error::Usage(format!(
                "negative generator backward: gradient {:?} does not match cached input {:?}",
                upstream.shape(),
                cache.embeddings.shape()
            )));
        }
        let p = &cache.prototypes;
        let c = &cache.weights;
        let mut grad_sim = Matrix::zeros(c.rows(), c.cols());
        for i in 0..c.rows() {
            let g = upstream.row(i);
            let grad_c: Vec<f64> = (0..p.rows())
                .map(|j| crate::numerics::dot(g, p.row(j)))
                .collect();
            let mean: f64 = grad_c.iter().zip(c.row(i)).map(|(a, b)| a * b).sum();
            for j in 0..p.rows() {
                let grad_logit = c.get(i, j) * (grad_c[j] - mean);
                grad_sim.set(i, j, -grad_logit / cache.temperature);
            }
        }
        let mut grad = cosine_rows_backward(&cache.embeddings, p, COSINE_EPS, &grad_sim)?;
        grad.add_assign(upstream)?;
        Ok(grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_row_gives_uniform_weights() {
        let w = Matrix::filled(2, 4, 0.3);
        let c = negative_weights(&w, 2.0).unwrap();
        assert!(c.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn two_category_example() {
        // (1 − (1, 0)) / 2 = (0, 0.5)
        let w = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let c = negative_weights(&w, 2.0).unwrap();
        assert!((c.get(0, 0) - 0.377_540_668_798_145_4).abs() < 1e-12);
        assert!((c.get(0, 1) - 0.622_459_331_201_854_6).abs() < 1e-12);
    }

    #[test]
    fn low_temperature_concentrates_on_least_similar() {
        let w = Matrix::from_rows(&[[0.9, -0.4, 0.2]]).unwrap();
        let c = negative_weights(&w, 1e-3).unwrap();
        assert!((c.get(0, 1) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn non_positive_temperature() {
        assert!(matches!(
            negative_weights(&Matrix::zeros(1, 2), 0.0),
            Err(Error::Domain(_))
        ));
        assert!(negative_weights(&Matrix::zeros(1, 2), -1.0).is_err());
    }

    #[test]
    fn no_seen_prototypes_is_a_state_error() {
        let bank = PrototypeBank::new(3, 2, 0.9).unwrap();
        let err = generate_negatives(&Matrix::zeros(1, 2), &bank, 2.0).unwrap_err();
        assert!(matches!(err, Error::State(_)));
    }

    #[test]
    fn sharp_weights_add_the_least_similar_prototype() {
        let mut bank = PrototypeBank::new(2, 2, 0.5).unwrap();
        bank.update(
            &Matrix::from_rows(&[[2.0, 0.0], [0.0, 2.0]]).unwrap(),
            &[0, 1],
        )
        .unwrap();
        let r = Matrix::from_rows(&[[1.0, 0.1]]).unwrap();
        let neg = generate_negatives(&r, &bank, 1e-3).unwrap();
        // Closest to p_0, so nearly all weight lands on p_1 = (0, 1).
        assert!((neg.get(0, 0) - 1.0).abs() < 1e-9);
        assert!((neg.get(0, 1) - 1.1).abs() < 1e-9);
    }

    #[test]
    fn uniform_weights_with_cancelling_prototypes() {
        let active = ActivePrototypes {
            matrix: Matrix::from_rows(&[[1.0, 2.0], [-1.0, -2.0]]).unwrap(),
            categories: vec![0, 1],
        };
        // Orthogonal to both prototypes, so W = 0 on both and C is uniform.
        let r = Matrix::from_rows(&[[2.0, -1.0]]).unwrap();
        let (neg, cache) = NegativeGenerator::forward(&r, &active, 2.0).unwrap();
        assert!((cache.weights().get(0, 0) - 0.5).abs() < 1e-15);
        assert!(neg
            .data()
            .iter()
            .zip(r.data())
            .all(|(a, b)| (a - b).abs() < 1e-15));
    }

    #[test]
    fn unseen_rows_do_not_contribute() {
        let mut bank = PrototypeBank::new(3, 2, 0.5).unwrap();
        bank.update(&Matrix::from_rows(&[[0.0, 4.0]]).unwrap(), &[2])
            .unwrap();
        let r = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let neg = generate_negatives(&r, &bank, 2.0).unwrap();
        // Single seen prototype gets weight 1.
        assert_eq!(neg.row(0), &[1.0, 2.0]);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let rand_m = |rng: &mut ChaCha8Rng, r: usize, c: usize| {
                Matrix::from_vec(
                    r,
                    c,
                    (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect(),
                )
                .unwrap()
            };
            let active = ActivePrototypes {
                matrix: rand_m(&mut rng, 4, 3),
                categories: vec![0, 1, 2, 3],
            };
            let r = rand_m(&mut rng, 5, 3);
            let w = rand_m(&mut rng, 5, 3);
            let (_, cache) = NegativeGenerator::forward(&r, &active, 0.7).unwrap();
            let analytic = NegativeGenerator::backward(&w, &cache).unwrap();
            let report = grad_check(
                |x| {
                    let r = Matrix::from_vec(5, 3, x.to_vec()).unwrap();
                    let (neg, _) = NegativeGenerator::forward(&r, &active, 0.7).unwrap();
                    neg.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
                },
                r.data(),
                analytic.data(),
                1e-6,
                1e-6,
            );
            assert!(report.within_tolerance, "{report:?}");
        }
    }
}
