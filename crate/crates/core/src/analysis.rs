//! Instruments for inspecting a frozen model: descriptor stability across
//! resampled support sets (meta shift), Fréchet distance between support and
//! query feature distributions, and raw embedding export.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{embed_images, Mode};
use crate::episodic::{
    class_descriptor, sample_episode, DescriptorKind, EpisodeConfig, FewShotDataset, ModelConfig,
};
use crate::error::{Error, Result};
use crate::numerics::{Array, ParameterSet};
use crate::rng::{stream, Stream};

/// Diagonal jitter added to both covariances in the FID protocol.
pub const FID_JITTER: f64 = 1e-6;

// Sub-stream offsets so that the instruments never share random draws.
const META_SHIFT_STREAM: u64 = 0;
const FID_STREAM: u64 = 1 << 32;
const EXPORT_STREAM: u64 = 2 << 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaShiftReport {
    /// Distance of each test's descriptor to the mean descriptor.
    pub distances: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation of `distances`.
    pub std: f64,
    pub source: DescriptorKind,
    pub class: usize,
    pub class_name: String,
    pub tests: usize,
    pub shots: usize,
    /// Norm of the mean descriptor, for comparing sources of different scale.
    pub mean_norm: f64,
}

impl MetaShiftReport {
    pub const CSV_HEADER: &'static str = "test_index,distance";

    pub fn csv_rows(&self) -> Vec<String> {
        self.distances
            .iter()
            .enumerate()
            .map(|(i, d)| format!("{i},{d}"))
            .collect()
    }

    /// `mean / mean_norm`; zero when the mean descriptor vanishes.
    pub fn relative_mean(&self) -> f64 {
        if self.mean_norm > 0.0 {
            self.mean / self.mean_norm
        } else {
            0.0
        }
    }
}

/// Distances of each descriptor to their arithmetic mean, plus the norm of
/// that mean.
pub fn distances_to_mean(descriptors: &[Vec<f64>]) -> Result<(Vec<f64>, f64)> {
    let Some(first) = descriptors.first() else {
        return Err(Error::InvalidArgument("no descriptors".into()));
    };
    let d = first.len();
    if descriptors.iter().any(|v| v.len() != d) {
        return Err(Error::shape(
            "distances_to_mean",
            "descriptors differ in length",
        ));
    }
    let n = descriptors.len() as f64;
    let mut mean = vec![0.0; d];
    for v in descriptors {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let dist = descriptors
        .iter()
        .map(|v| {
            v.iter()
                .zip(&mean)
                .map(|(x, m)| (x - m) * (x - m))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let norm = mean.iter().map(|m| m * m).sum::<f64>().sqrt();
    Ok((dist, norm))
}

/// Resamples `shots` images of one class `num_tests` times and measures how far
/// each resulting descriptor lies from the mean descriptor. Test `t` draws
/// from its own stream, so the result is independent of thread count.
pub fn meta_shift<F>(
    dataset: &FewShotDataset,
    class_id: usize,
    shots: usize,
    num_tests: usize,
    source: DescriptorKind,
    descriptor_fn: F,
    seed: u64,
) -> Result<MetaShiftReport>
where
    F: Fn(&Array) -> Result<Vec<f64>> + Sync,
{
    if num_tests < 2 {
        return Err(Error::InvalidArgument(
            "meta shift needs at least 2 tests".into(),
        ));
    }
    if shots == 0 {
        return Err(Error::InvalidArgument("shots must be >= 1".into()));
    }
    let class = dataset.classes.get(class_id).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "class {class_id} out of range for {} classes",
            dataset.num_classes()
        ))
    })?;
    if class.images.len() < shots {
        return Err(Error::InsufficientImages {
            class: class.name.clone(),
            available: class.images.len(),
            required: shots,
        });
    }
    let descriptors = (0..num_tests)
        .into_par_iter()
        .map(|t| {
            let mut rng = stream(seed, Stream::Analysis, META_SHIFT_STREAM | t as u64);
            let picked = index::sample(&mut rng, class.images.len(), shots);
            let items: Vec<_> = picked.iter().map(|i| (class_id, i)).collect();
            descriptor_fn(&dataset.stack(&items)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let (distances, mean_norm) = distances_to_mean(&descriptors)?;
    let n = distances.len() as f64;
    let mean = distances.iter().sum::<f64>() / n;
    let std = (distances
        .iter()
        .map(|d| (d - mean) * (d - mean))
        .sum::<f64>()
        / n)
        .sqrt();
    Ok(MetaShiftReport {
        distances,
        mean,
        std,
        source,
        class: class_id,
        class_name: class.name.clone(),
        tests: num_tests,
        shots,
        mean_norm,
    })
}

/// [`meta_shift`] with descriptors from a model's pipeline.
#[allow(clippy::too_many_arguments)]
pub fn meta_shift_model(
    dataset: &FewShotDataset,
    class_id: usize,
    shots: usize,
    num_tests: usize,
    model: &ModelConfig,
    params: &ParameterSet,
    source: DescriptorKind,
    seed: u64,
) -> Result<MetaShiftReport> {
    meta_shift(
        dataset,
        class_id,
        shots,
        num_tests,
        source,
        |imgs| class_descriptor(model, params, imgs, source),
        seed,
    )
}

/// Mean and unbiased covariance of a sample.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSummary {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub count: usize,
}

impl GaussianSummary {
    /// Summary of the rows of `[n, D]` samples, `n >= 2`.
    pub fn from_samples(samples: &Array) -> Result<Self> {
        if samples.ndim() != 2 {
            return Err(Error::shape(
                "GaussianSummary",
                format!("{:?}", samples.shape()),
            ));
        }
        let (n, d) = (samples.rows(), samples.row_len());
        if n < 2 {
            return Err(Error::InvalidArgument(format!(
                "covariance needs at least 2 samples, got {n}"
            )));
        }
        let x = DMatrix::from_row_slice(n, d, samples.data());
        let mean = x.row_mean().transpose();
        let mut centered = x;
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        let mut cov = centered.transpose() * &centered / (n as f64 - 1.0);
        symmetrize(&mut cov);
        Ok(GaussianSummary {
            mean,
            cov,
            count: n,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn with_jitter(mut self, jitter: f64) -> Self {
        for i in 0..self.dim() {
            self.cov[(i, i)] += jitter;
        }
        self
    }
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}

/// Square roots of the eigenvalues of a symmetric PSD matrix. Eigenvalues
/// within roundoff of zero, including negative ones, clamp to zero; their
/// square roots would otherwise be far above roundoff.
fn clamped_roots(eigenvalues: &DVector<f64>) -> DVector<f64> {
    let scale = eigenvalues.iter().fold(0.0f64, |m, l| m.max(l.abs()));
    let floor = eigenvalues.len() as f64 * f64::EPSILON * scale;
    eigenvalues.map(|l| if l > floor { l.sqrt() } else { 0.0 })
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let root = clamped_roots(&eig.eigenvalues);
    &eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose()
}

/// `|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))`. The trace of the cross
/// term is the sum of singular values of `S_a^(1/2) S_b^(1/2)`, which keeps
/// small eigen-directions (such as jitter on a rank-deficient covariance)
/// accurate instead of squaring them below roundoff.
pub fn frechet_distance(a: &GaussianSummary, b: &GaussianSummary) -> Result<f64> {
    if a.dim() != b.dim() || a.cov.shape() != b.cov.shape() {
        return Err(Error::shape(
            "frechet_distance",
            format!("dimensions {} and {}", a.dim(), b.dim()),
        ));
    }
    let mean_term = (&a.mean - &b.mean).norm_squared();
    let cross = (psd_sqrt(&a.cov) * psd_sqrt(&b.cov))
        .singular_values()
        .sum();
    let fd = mean_term + a.cov.trace() + b.cov.trace() - 2.0 * cross;
    Ok(fd.max(0.0))
}

/// Fréchet distance between two feature samples, each summarized with
/// `jitter` added to its covariance diagonal.
pub fn feature_fid(a: &Array, b: &Array, jitter: f64) -> Result<f64> {
    let sa = GaussianSummary::from_samples(a)?.with_jitter(jitter);
    let sb = GaussianSummary::from_samples(b)?.with_jitter(jitter);
    frechet_distance(&sa, &sb)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidReport {
    pub fid: Vec<f64>,
    pub jitter: f64,
    pub ways: usize,
    pub shots: usize,
    pub queries_per_class: usize,
}

impl FidReport {
    pub const CSV_HEADER: &'static str = "test_index,fid";

    pub fn csv_rows(&self) -> Vec<String> {
        self.fid
            .iter()
            .enumerate()
            .map(|(i, f)| format!("{i},{f}"))
            .collect()
    }
}

/// Per test, samples a task, embeds its support and query images in eval mode
/// and reports the Fréchet distance between the two feature sets.
pub fn fid_protocol(
    dataset: &FewShotDataset,
    model: &ModelConfig,
    params: &ParameterSet,
    num_tests: usize,
    episode: &EpisodeConfig,
    seed: u64,
) -> Result<FidReport> {
    if num_tests == 0 {
        return Err(Error::InvalidArgument("num_tests must be >= 1".into()));
    }
    let fid = (0..num_tests)
        .into_par_iter()
        .map(|t| {
            let mut rng = stream(seed, Stream::Analysis, FID_STREAM | t as u64);
            let task = sample_episode(dataset, episode, &mut rng)?;
            let support = dataset.stack(&task.support_items())?;
            let query = dataset.stack(&task.query_items())?;
            let fs = embed_images(&support, &model.embedding, params, Mode::Eval)?;
            let fq = embed_images(&query, &model.embedding, params, Mode::Eval)?;
            feature_fid(&fs, &fq, FID_JITTER)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FidReport {
        fid,
        jitter: FID_JITTER,
        ways: episode.ways,
        shots: episode.shots,
        queries_per_class: episode.queries_per_class,
    })
}

/// One embedded sample.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRow {
    pub class: String,
    pub features: Vec<f64>,
}

pub fn embeddings_csv_header(dim: usize) -> String {
    let mut h = String::from("class");
    for i in 0..dim {
        h.push_str(&format!(",feat_{i}"));
    }
    h
}

impl EmbeddingRow {
    pub fn csv_row(&self) -> String {
        let mut s = self.class.clone();
        for f in &self.features {
            s.push_str(&format!(",{f}"));
        }
        s
    }
}

/// Eval-mode features of up to `samples_per_class` randomly chosen images per
/// class, class-major.
pub fn export_embeddings(
    dataset: &FewShotDataset,
    model: &ModelConfig,
    params: &ParameterSet,
    samples_per_class: usize,
    seed: u64,
) -> Result<Vec<EmbeddingRow>> {
    let mut rows = Vec::new();
    for (c, class) in dataset.classes.iter().enumerate() {
        let n = samples_per_class.min(class.images.len());
        if n == 0 {
            continue;
        }
        let mut rng = stream(seed, Stream::Analysis, EXPORT_STREAM | c as u64);
        let items: Vec<_> = index::sample(&mut rng, class.images.len(), n)
            .iter()
            .map(|i| (c, i))
            .collect();
        let feats = embed_images(
            &dataset.stack(&items)?,
            &model.embedding,
            params,
            Mode::Eval,
        )?;
        for i in 0..feats.rows() {
            rows.push(EmbeddingRow {
                class: class.name.clone(),
                features: feats.row(i).to_vec(),
            });
        }
    }
    Ok(rows)
}
