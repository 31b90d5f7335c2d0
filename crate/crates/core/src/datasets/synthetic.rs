use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{DatasetSplit, FeatureRecord, ObjectKind, SplitRole};
use crate::error::{Error, Result};

const MAX_PLACEMENT_ATTEMPTS: usize = 1000;

/// Parameters of the synthetic feature benchmark.
///
/// ID categories are isotropic Gaussians whose means sit on a sphere of
/// radius `class_separation`; OOD clusters are placed the same way but kept
/// at least `class_separation / 2` away from every ID mean. Background
/// distractors come from `N(0, (2·noise_sigma)² I)`.
///
/// Randomness comes from a single `ChaCha8Rng` seeded with
/// `seed_from_u64(seed)`; normals use `rand_distr::StandardNormal`. Draws
/// happen in a fixed order (ID means, OOD means, train, id_eval, ood_eval),
/// so a seed reproduces the same data on every platform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub t: usize,
    pub h: usize,
    pub per_class: usize,
    pub class_separation: f64,
    pub noise_sigma: f64,
    pub ood_clusters: usize,
    pub ood_per_cluster: usize,
    pub background_per_image: usize,
    pub objects_per_image: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            t: 5,
            h: 64,
            per_class: 100,
            class_separation: 8.0,
            noise_sigma: 1.0,
            ood_clusters: 3,
            ood_per_cluster: 100,
            background_per_image: 1,
            objects_per_image: 4,
            seed: 7,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t < 2 {
            return Err(Error::Config(format!(
                "t must be at least 2, got {}",
                self.t
            )));
        }
        if self.h == 0 {
            return Err(Error::Config("h must be positive".into()));
        }
        if !(self.noise_sigma > 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!(
                "noise_sigma must be positive and finite, got {}",
                self.noise_sigma
            )));
        }
        if !(self.class_separation >= 0.0 && self.class_separation.is_finite()) {
            return Err(Error::Config(format!(
                "class_separation must be non-negative and finite, got {}",
                self.class_separation
            )));
        }
        if self.objects_per_image == 0 {
            return Err(Error::Config("objects_per_image must be at least 1".into()));
        }
        Ok(())
    }
}

/// The three generated splits plus the Gaussian means behind them.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub train: DatasetSplit,
    pub id_eval: DatasetSplit,
    pub ood_eval: DatasetSplit,
    pub id_means: Vec<Vec<f64>>,
    pub ood_means: Vec<Vec<f64>>,
}

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticData> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut id_means: Vec<Vec<f64>> = Vec::with_capacity(cfg.t);
    for c in 0..cfg.t {
        let mean = place_mean(&mut rng, cfg, |m| {
            id_means
                .iter()
                .all(|other| distance(m, other) >= cfg.class_separation)
        })
        .ok_or_else(|| {
            Error::Generation(format!(
                "could not place ID mean {c} at distance >= {} from the others in {} dimensions",
                cfg.class_separation, cfg.h
            ))
        })?;
        id_means.push(mean);
    }

    let mut ood_means = Vec::with_capacity(cfg.ood_clusters);
    for k in 0..cfg.ood_clusters {
        let mean = place_mean(&mut rng, cfg, |m| {
            id_means
                .iter()
                .all(|id| distance(m, id) >= cfg.class_separation / 2.0)
        })
        .ok_or_else(|| {
            Error::Generation(format!(
                "could not place OOD mean {k} at distance >= {} from every ID mean",
                cfg.class_separation / 2.0
            ))
        })?;
        ood_means.push(mean);
    }

    let mut next_image = 0u64;
    let train = id_split(&mut rng, cfg, &id_means, SplitRole::Train, &mut next_image)?;
    let id_eval = id_split(&mut rng, cfg, &id_means, SplitRole::IdEval, &mut next_image)?;
    let ood_eval = ood_split(&mut rng, cfg, &ood_means, &mut next_image)?;

    Ok(SyntheticData {
        train,
        id_eval,
        ood_eval,
        id_means,
        ood_means,
    })
}

fn place_mean(
    rng: &mut ChaCha8Rng,
    cfg: &SyntheticConfig,
    accept: impl Fn(&[f64]) -> bool,
) -> Option<Vec<f64>> {
    for _ in 0..MAX_PLACEMENT_ATTEMPTS {
        let mut dir: Vec<f64> = (0..cfg.h).map(|_| StandardNormal.sample(rng)).collect();
        let n = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n == 0.0 {
            continue;
        }
        dir.iter_mut().for_each(|v| *v *= cfg.class_separation / n);
        if accept(&dir) {
            return Some(dir);
        }
    }
    None
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn gaussian(rng: &mut ChaCha8Rng, mean: &[f64], sigma: f64) -> Vec<f64> {
    mean.iter()
        .map(|m| {
            let z: f64 = StandardNormal.sample(rng);
            m + sigma * z
        })
        .collect()
}

fn id_split(
    rng: &mut ChaCha8Rng,
    cfg: &SyntheticConfig,
    means: &[Vec<f64>],
    role: SplitRole,
    next_image: &mut u64,
) -> Result<DatasetSplit> {
    let mut objects: Vec<(usize, Vec<f64>)> = Vec::with_capacity(cfg.t * cfg.per_class);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..cfg.per_class {
            objects.push((c, gaussian(rng, mean, cfg.noise_sigma)));
        }
    }
    objects.shuffle(rng);

    let origin = vec![0.0; cfg.h];
    let mut records = Vec::new();
    for chunk in objects.chunks(cfg.objects_per_image) {
        let image_id = *next_image;
        *next_image += 1;
        for (c, feature) in chunk {
            records.push(FeatureRecord {
                image_id,
                feature: feature.clone(),
                kind: ObjectKind::Id(*c),
                cls_score: rng.random_range(0.5..=1.0),
                annotated: true,
            });
        }
        for _ in 0..cfg.background_per_image {
            records.push(FeatureRecord {
                image_id,
                feature: gaussian(rng, &origin, 2.0 * cfg.noise_sigma),
                kind: ObjectKind::Background,
                cls_score: rng.random_range(0.0..0.5),
                annotated: false,
            });
        }
    }
    DatasetSplit::new(records, cfg.t, cfg.h, role)
}

fn ood_split(
    rng: &mut ChaCha8Rng,
    cfg: &SyntheticConfig,
    means: &[Vec<f64>],
    next_image: &mut u64,
) -> Result<DatasetSplit> {
    let mut objects = Vec::with_capacity(means.len() * cfg.ood_per_cluster);
    for mean in means {
        for _ in 0..cfg.ood_per_cluster {
            objects.push(gaussian(rng, mean, cfg.noise_sigma));
        }
    }
    objects.shuffle(rng);

    let mut records = Vec::with_capacity(objects.len());
    for chunk in objects.chunks(cfg.objects_per_image) {
        let image_id = *next_image;
        *next_image += 1;
        for feature in chunk {
            records.push(FeatureRecord {
                image_id,
                feature: feature.clone(),
                kind: ObjectKind::Ood,
                cls_score: rng.random_range(0.5..=1.0),
                annotated: true,
            });
        }
    }
    DatasetSplit::new(records, cfg.t, cfg.h, SplitRole::OodEval)
}

#[cfg(test)]
mod tests {
    use super::*;

    // Independent nearest-centroid classifier over the generated means.
    fn nearest_mean(x: &[f64], means: &[Vec<f64>]) -> usize {
        let mut best = (0, f64::INFINITY);
        for (c, m) in means.iter().enumerate() {
            let d: f64 = x.iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.1 {
                best = (c, d);
            }
        }
        best.0
    }

    #[test]
    fn zero_counts_give_empty_splits() {
        let cfg = SyntheticConfig {
            per_class: 0,
            ood_per_cluster: 0,
            ..Default::default()
        };
        let data = generate_synthetic(&cfg).unwrap();
        for split in [&data.train, &data.id_eval, &data.ood_eval] {
            assert!(split.is_empty());
            assert_eq!((split.t, split.h), (5, 64));
        }
    }

    #[test]
    fn same_seed_same_data() {
        let cfg = SyntheticConfig {
            per_class: 10,
            ..Default::default()
        };
        assert_eq!(
            generate_synthetic(&cfg).unwrap(),
            generate_synthetic(&cfg).unwrap()
        );
        let other = SyntheticConfig {
            seed: 8,
            ..cfg.clone()
        };
        assert_ne!(
            generate_synthetic(&cfg).unwrap().train,
            generate_synthetic(&other).unwrap().train
        );
    }

    #[test]
    fn nearest_mean_accuracy_on_separated_classes() {
        let cfg = SyntheticConfig {
            t: 5,
            h: 16,
            per_class: 200,
            class_separation: 8.0,
            noise_sigma: 1.0,
            ..Default::default()
        };
        let data = generate_synthetic(&cfg).unwrap();
        let (idx, labels) = data.train.id_indices();
        let correct = idx
            .iter()
            .zip(&labels)
            .filter(|(&i, &c)| nearest_mean(&data.train.records[i].feature, &data.id_means) == c)
            .count();
        let acc = correct as f64 / idx.len() as f64;
        assert!(acc >= 0.99, "accuracy {acc}");
    }

    #[test]
    fn mean_placement_respects_separation() {
        let data = generate_synthetic(&SyntheticConfig::default()).unwrap();
        for (i, a) in data.id_means.iter().enumerate() {
            for b in &data.id_means[i + 1..] {
                assert!(distance(a, b) >= 8.0);
            }
            for o in &data.ood_means {
                assert!(distance(a, o) >= 4.0);
            }
        }
    }

    #[test]
    fn infeasible_placement_is_an_error() {
        let cfg = SyntheticConfig {
            t: 3,
            h: 1,
            ..Default::default()
        };
        assert!(matches!(
            generate_synthetic(&cfg),
            Err(Error::Generation(_))
        ));
    }

    #[test]
    fn image_structure_and_scores() {
        let cfg = SyntheticConfig {
            per_class: 8,
            objects_per_image: 4,
            background_per_image: 2,
            ..Default::default()
        };
        let data = generate_synthetic(&cfg).unwrap();
        assert!(data.train.records.iter().all(|r| r.kind != ObjectKind::Ood));
        assert!(data
            .ood_eval
            .records
            .iter()
            .all(|r| r.kind == ObjectKind::Ood));
        for r in &data.id_eval.records {
            if r.annotated {
                assert!((0.5..=1.0).contains(&r.cls_score));
            } else {
                assert_eq!(r.kind, ObjectKind::Background);
                assert!(r.cls_score < 0.5);
            }
        }
        // 40 objects in images of 4, plus 2 distractors each
        assert_eq!(data.train.len(), 40 + 10 * 2);
        let first_image: Vec<_> = data
            .train
            .records
            .iter()
            .filter(|r| r.image_id == 0)
            .collect();
        assert_eq!(first_image.iter().filter(|r| r.annotated).count(), 4);
        let train_ids: std::collections::BTreeSet<_> =
            data.train.records.iter().map(|r| r.image_id).collect();
        assert!(data
            .id_eval
            .records
            .iter()
            .all(|r| !train_ids.contains(&r.image_id)));
    }

    #[test]
    fn invalid_configs() {
        for cfg in [
            SyntheticConfig {
                t: 1,
                ..Default::default()
            },
            SyntheticConfig {
                noise_sigma: 0.0,
                ..Default::default()
            },
            SyntheticConfig {
                objects_per_image: 0,
                ..Default::default()
            },
        ] {
            assert!(matches!(generate_synthetic(&cfg), Err(Error::Config(_))));
        }
    }
}
