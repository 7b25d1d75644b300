//! Procedural few-shot datasets: each class is a fixed pattern of oriented
//! Gaussian blobs, and each image is that template plus i.i.d. pixel noise,
//! quantized to 8 bits.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::dataset::{quantize, ClassImages, DatasetBundle, FewShotDataset, Manifest, Split};
use crate::error::{Error, Result};
use crate::numerics::Array;
use crate::rng::{stream, Stream};

const BLOBS_PER_CLASS: usize = 3;

/// Generator settings for a three-way split synthetic dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub train_classes: usize,
    pub val_classes: usize,
    pub test_classes: usize,
    pub images_per_class: usize,
    pub image_size: usize,
    pub class_separation: f64,
    pub noise: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            train_classes: 20,
            val_classes: 5,
            test_classes: 10,
            images_per_class: 60,
            image_size: 16,
            class_separation: 0.8,
            noise: 0.05,
        }
    }
}

impl SyntheticConfig {
    pub fn total_classes(&self) -> usize {
        self.train_classes + self.val_classes + self.test_classes
    }
}

fn validate(image_size: usize, class_separation: f64, noise: f64) -> Result<()> {
    if !(class_separation > 0.0 && class_separation.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "class_separation must be positive, got {class_separation}"
        )));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "noise must be non-negative, got {noise}"
        )));
    }
    if image_size < 4 {
        return Err(Error::InvalidArgument(format!(
            "image_size must be at least 4, got {image_size}"
        )));
    }
    Ok(())
}

/// Template in `[0, 1]` for global class `class`; independent of how many
/// classes are generated alongside it.
fn template(seed: u64, class: usize, size: usize) -> Vec<f64> {
    let mut rng = stream(seed, Stream::Data, 2 * class as u64);
    let s = size as f64;
    let mut t = vec![0.0; size * size];
    for _ in 0..BLOBS_PER_CLASS {
        let cx = rng.random_range(0.15..0.85) * s;
        let cy = rng.random_range(0.15..0.85) * s;
        let sx = rng.random_range(0.06..0.22) * s;
        let sy = rng.random_range(0.06..0.22) * s;
        let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let amp = rng.random_range(0.5..1.0);
        let (sin, cos) = theta.sin_cos();
        for y in 0..size {
            for x in 0..size {
                let dx = x as f64 + 0.5 - cx;
                let dy = y as f64 + 0.5 - cy;
                let u = cos * dx + sin * dy;
                let v = -sin * dx + cos * dy;
                t[y * size + x] += amp * (-0.5 * (u * u / (sx * sx) + v * v / (sy * sy))).exp();
            }
        }
    }
    let max = t.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        t.iter_mut().for_each(|v| *v /= max);
    }
    t
}

fn class_images(
    seed: u64,
    class: usize,
    images: usize,
    size: usize,
    separation: f64,
    noise: f64,
) -> Vec<Array> {
    let t = template(seed, class, size);
    let base = 0.5 * (1.0 - separation.min(1.0));
    let mut rng = stream(seed, Stream::Data, 2 * class as u64 + 1);
    (0..images)
        .map(|_| {
            let data = t
                .iter()
                .map(|&p| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    quantize(base + separation * p + noise * z) as f64 / 255.0
                })
                .collect();
            Array::new(&[1, size, size], data).expect("template shape")
        })
        .collect()
}

fn class_name(class: usize) -> String {
    format!("class_{class:03}")
}

/// One split of `num_classes` synthetic classes, labelled `Split::Train`.
pub fn make_synthetic_dataset(
    num_classes: usize,
    images_per_class: usize,
    image_size: usize,
    class_separation: f64,
    noise: f64,
    seed: u64,
) -> Result<FewShotDataset> {
    validate(image_size, class_separation, noise)?;
    let classes = (0..num_classes)
        .map(|c| ClassImages {
            name: class_name(c),
            images: class_images(
                seed,
                c,
                images_per_class,
                image_size,
                class_separation,
                noise,
            ),
        })
        .collect();
    Ok(FewShotDataset {
        split: Split::Train,
        classes,
        image_shape: [1, image_size, image_size],
    })
}

/// Class-disjoint train/val/test splits; classes are assigned to splits in
/// generation order.
pub fn make_synthetic_bundle(cfg: &SyntheticConfig, seed: u64) -> Result<DatasetBundle> {
    let all = make_synthetic_dataset(
        cfg.total_classes(),
        cfg.images_per_class,
        cfg.image_size,
        cfg.class_separation,
        cfg.noise,
        seed,
    )?;
    let mut classes = all.classes.into_iter();
    let mut take = |split: Split, n: usize| FewShotDataset {
        split,
        classes: classes.by_ref().take(n).collect(),
        image_shape: all.image_shape,
    };
    let train = take(Split::Train, cfg.train_classes);
    let val = take(Split::Val, cfg.val_classes);
    let test = take(Split::Test, cfg.test_classes);

    let mut manifest = Manifest::default();
    manifest.set("generator", "synthetic-blobs");
    manifest.set("seed", seed);
    manifest.set("images_per_class", cfg.images_per_class);
    manifest.set("class_separation", cfg.class_separation);
    manifest.set("noise", cfg.noise);
    manifest.set("blobs_per_class", BLOBS_PER_CLASS);
    for ds in [&train, &val, &test] {
        let (mean, std) = pixel_stats(ds);
        manifest.set(&format!("stats.{}.pixel_mean", ds.split.name()), mean);
        manifest.set(&format!("stats.{}.pixel_std", ds.split.name()), std);
    }
    Ok(DatasetBundle {
        train,
        val,
        test,
        manifest,
    })
}

fn pixel_stats(ds: &FewShotDataset) -> (f64, f64) {
    let mut n = 0usize;
    let mut sum = 0.0;
    let mut sq = 0.0;
    for img in ds.classes.iter().flat_map(|c| &c.images) {
        for &v in img.data() {
            n += 1;
            sum += v;
            sq += v * v;
        }
    }
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = sum / n as f64;
    (mean, (sq / n as f64 - mean * mean).max(0.0).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_noise_gives_identical_images() {
        let ds = make_synthetic_dataset(3, 4, 8, 0.8, 0.0, 1).unwrap();
        for c in &ds.classes {
            assert!(c.images.iter().all(|i| i == &c.images[0]));
        }
        assert_ne!(ds.classes[0].images[0], ds.classes[1].images[0]);
    }

    #[test]
    fn seeds_control_the_data() {
        let a = make_synthetic_dataset(3, 4, 8, 0.8, 0.1, 1).unwrap();
        let b = make_synthetic_dataset(3, 4, 8, 0.8, 0.1, 1).unwrap();
        let c = make_synthetic_dataset(3, 4, 8, 0.8, 0.1, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_non_positive_separation() {
        assert!(make_synthetic_dataset(2, 2, 8, 0.0, 0.1, 1).is_err());
        assert!(make_synthetic_dataset(2, 2, 8, -1.0, 0.1, 1).is_err());
    }

    #[test]
    fn class_templates_do_not_depend_on_class_count() {
        let a = make_synthetic_dataset(2, 3, 8, 0.8, 0.1, 5).unwrap();
        let b = make_synthetic_dataset(5, 3, 8, 0.8, 0.1, 5).unwrap();
        assert_eq!(a.classes[..], b.classes[..2]);
    }

    #[test]
    fn nearest_mean_pixel_classifier_separates_classes() {
        let ds = make_synthetic_dataset(10, 40, 16, 0.8, 0.05, 3).unwrap();
        // Means from the first half of each class, classify the second half.
        let means: Vec<Vec<f64>> = ds
            .classes
            .iter()
            .map(|c| {
                let mut m = vec![0.0; 256];
                for img in &c.images[..20] {
                    m.iter_mut()
                        .zip(img.data())
                        .for_each(|(a, b)| *a += b / 20.0);
                }
                m
            })
            .collect();
        let mut correct = 0;
        let mut total = 0;
        for (k, c) in ds.classes.iter().enumerate() {
            for img in &c.images[20..] {
                let d = |m: &Vec<f64>| -> f64 {
                    m.iter().zip(img.data()).map(|(a, b)| (a - b).powi(2)).sum()
                };
                let best = (0..means.len())
                    .min_by(|&i, &j| d(&means[i]).total_cmp(&d(&means[j])))
                    .unwrap();
                correct += (best == k) as usize;
                total += 1;
            }
        }
        assert!(correct as f64 / total as f64 > 0.99, "{correct}/{total}");
    }

    #[test]
    fn bundle_splits_are_class_disjoint() {
        let cfg = SyntheticConfig {
            train_classes: 3,
            val_classes: 2,
            test_classes: 2,
            images_per_class: 3,
            image_size: 8,
            ..SyntheticConfig::default()
        };
        let b = make_synthetic_bundle(&cfg, 9).unwrap();
        let mut names: Vec<&str> = [&b.train, &b.val, &b.test]
            .iter()
            .flat_map(|d| d.classes.iter().map(|c| c.name.as_str()))
            .collect();
        assert_eq!(names.len(), 7);
        names.sort();
        names.dedup();
        assert_eq!(names.len(), 7);
    }

    #[test]
    fn bundle_round_trips_through_disk() {
        let cfg = SyntheticConfig {
            train_classes: 2,
            val_classes: 1,
            test_classes: 1,
            images_per_class: 3,
            image_size: 8,
            ..SyntheticConfig::default()
        };
        let b = make_synthetic_bundle(&cfg, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        b.save(dir.path()).unwrap();
        let back = DatasetBundle::load(dir.path()).unwrap();
        assert_eq!(back.train, b.train);
        assert_eq!(back.val, b.val);
        assert_eq!(back.test, b.test);
        assert_eq!(back.manifest.get("seed").unwrap(), "4");
    }
}
