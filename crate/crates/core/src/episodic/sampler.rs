use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::dataset::FewShotDataset;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeConfig {
    pub ways: usize,
    pub shots: usize,
    pub queries_per_class: usize,
    /// Outer-loop iterations per `train` call.
    pub episodes: usize,
    pub tasks_per_episode: usize,
    pub seed: u64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig {
            ways: 5,
            shots: 5,
            queries_per_class: 15,
            episodes: 1000,
            tasks_per_episode: 1,
            seed: 0,
        }
    }
}

impl EpisodeConfig {
    /// Support set size `C * K`.
    pub fn support_size(&self) -> usize {
        self.ways * self.shots
    }

    pub fn validate(&self) -> Result<()> {
        if self.ways == 0 || self.shots == 0 {
            return Err(Error::InvalidArgument(format!(
                "episodes need ways >= 1 and shots >= 1, got {}-way {}-shot",
                self.ways, self.shots
            )));
        }
        if self.tasks_per_episode == 0 {
            return Err(Error::InvalidArgument(
                "tasks_per_episode must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Stricter check used by training and evaluation: a classification loss
    /// needs at least two classes and one query.
    pub fn validate_for_classification(&self) -> Result<()> {
        self.validate()?;
        if self.ways < 2 || self.queries_per_class == 0 {
            return Err(Error::InvalidArgument(format!(
                "classification needs ways >= 2 and queries_per_class >= 1, got {} / {}",
                self.ways, self.queries_per_class
            )));
        }
        Ok(())
    }
}

/// One K-way C-shot task. Position `k` of `classes` is episode label `k`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeTask {
    /// Global class index per episode label.
    pub classes: Vec<usize>,
    /// Image indices within each class, `support[k].len() == shots`.
    pub support: Vec<Vec<usize>>,
    pub query: Vec<Vec<usize>>,
}

impl EpisodeTask {
    pub fn ways(&self) -> usize {
        self.classes.len()
    }

    /// Episode label of a global class id.
    pub fn episode_label(&self, global: usize) -> Option<usize> {
        self.classes.iter().position(|&c| c == global)
    }

    /// `(class, image)` pairs of the support set, class-major.
    pub fn support_items(&self) -> Vec<(usize, usize)> {
        items(&self.classes, &self.support)
    }

    pub fn query_items(&self) -> Vec<(usize, usize)> {
        items(&self.classes, &self.query)
    }

    /// Episode labels of the query items, in [`query_items`](Self::query_items) order.
    pub fn query_labels(&self) -> Vec<usize> {
        self.query
            .iter()
            .enumerate()
            .flat_map(|(k, q)| std::iter::repeat_n(k, q.len()))
            .collect()
    }
}

fn items(classes: &[usize], per_class: &[Vec<usize>]) -> Vec<(usize, usize)> {
    classes
        .iter()
        .zip(per_class)
        .flat_map(|(&c, idx)| idx.iter().map(move |&i| (c, i)))
        .collect()
}

/// Draws `ways` distinct classes, then per class `shots` support images and
/// `queries_per_class` query images from the remainder, all without
/// replacement.
pub fn sample_episode(
    dataset: &FewShotDataset,
    cfg: &EpisodeConfig,
    rng: &mut impl Rng,
) -> Result<EpisodeTask> {
    cfg.validate()?;
    let n = dataset.num_classes();
    if n < cfg.ways {
        return Err(Error::InvalidArgument(format!(
            "{}-way episodes need {} classes, the {} split has {n}",
            cfg.ways,
            cfg.ways,
            dataset.split.name()
        )));
    }
    let per_class = cfg.shots + cfg.queries_per_class;
    dataset.check_capacity(per_class)?;

    let classes = index::sample(rng, n, cfg.ways).into_vec();
    let mut support = Vec::with_capacity(cfg.ways);
    let mut query = Vec::with_capacity(cfg.ways);
    for &c in &classes {
        let picked = index::sample(rng, dataset.classes[c].images.len(), per_class).into_vec();
        support.push(picked[..cfg.shots].to_vec());
        query.push(picked[cfg.shots..].to_vec());
    }
    Ok(EpisodeTask {
        classes,
        support,
        query,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episodic::dataset::{ClassImages, Split};
    use crate::numerics::Array;
    use crate::rng::{stream, Stream};
    use std::collections::BTreeSet;

    fn dataset(classes: usize, images: usize) -> FewShotDataset {
        FewShotDataset {
            split: Split::Train,
            classes: (0..classes)
                .map(|c| ClassImages {
                    name: format!("c{c}"),
                    images: vec![Array::zeros(&[1, 2, 2]); images],
                })
                .collect(),
            image_shape: [1, 2, 2],
        }
    }

    fn cfg(ways: usize, shots: usize, queries: usize) -> EpisodeConfig {
        EpisodeConfig {
            ways,
            shots,
            queries_per_class: queries,
            ..EpisodeConfig::default()
        }
    }

    #[test]
    fn five_way_five_shot_sizes() {
        let ds = dataset(10, 30);
        let t = sample_episode(&ds, &cfg(5, 5, 15), &mut stream(0, Stream::Sampling, 0)).unwrap();
        assert_eq!(t.support_items().len(), 25);
        assert_eq!(t.query_items().len(), 75);
        assert_eq!(t.query_labels().len(), 75);
    }

    #[test]
    fn exhaustive_single_class() {
        let ds = dataset(1, 2);
        let t = sample_episode(&ds, &cfg(1, 1, 1), &mut stream(0, Stream::Sampling, 0)).unwrap();
        assert_eq!(t.support[0].len(), 1);
        assert_eq!(t.query[0].len(), 1);
        assert_ne!(t.support[0][0], t.query[0][0]);
    }

    #[test]
    fn deterministic_given_rng() {
        let ds = dataset(10, 30);
        let a = sample_episode(&ds, &cfg(5, 5, 5), &mut stream(3, Stream::Sampling, 0)).unwrap();
        let b = sample_episode(&ds, &cfg(5, 5, 5), &mut stream(3, Stream::Sampling, 0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn insufficient_images_names_the_class() {
        let mut ds = dataset(3, 10);
        ds.classes[2].images.truncate(3);
        let err = sample_episode(&ds, &cfg(2, 2, 2), &mut stream(0, Stream::Sampling, 0))
            .unwrap_err()
            .to_string();
        assert!(err.contains("c2"), "{err}");
    }

    #[test]
    fn disjoint_and_bijective_over_many_episodes() {
        let ds = dataset(12, 20);
        let mut rng = stream(11, Stream::Sampling, 0);
        for _ in 0..1000 {
            let t = sample_episode(&ds, &cfg(5, 3, 4), &mut rng).unwrap();
            let distinct: BTreeSet<_> = t.classes.iter().collect();
            assert_eq!(distinct.len(), 5);
            for (k, &c) in t.classes.iter().enumerate() {
                assert_eq!(t.episode_label(c), Some(k));
                let s: BTreeSet<_> = t.support[k].iter().collect();
                let q: BTreeSet<_> = t.query[k].iter().collect();
                assert_eq!(s.len(), 3);
                assert_eq!(q.len(), 4);
                assert!(s.is_disjoint(&q));
            }
        }
    }
}
