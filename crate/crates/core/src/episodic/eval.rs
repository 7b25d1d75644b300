use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::FewShotDataset;
use super::model::{descriptors_graph, DescriptorKind, ModelConfig, TaskBatch};
use super::sampler::{sample_episode, EpisodeConfig};
use crate::embedding::{argmax, embed_graph, Mode};
use crate::error::{Error, Result};
use crate::metric::{euclidean_logits_graph, relation_scores_graph};
use crate::numerics::{Array, Graph, ParameterSet};
use crate::rng::{stream, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricHead {
    Euclidean,
    Relation,
    Both,
}

impl MetricHead {
    fn euclidean(self) -> bool {
        matches!(self, MetricHead::Euclidean | MetricHead::Both)
    }

    fn relation(self) -> bool {
        matches!(self, MetricHead::Relation | MetricHead::Both)
    }
}

/// Mean accuracy and the half-width of its 95% confidence interval,
/// `1.96 * sigma / sqrt(n)` with the population standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub mean: f64,
    pub std: f64,
    pub ci95: f64,
}

impl Accuracy {
    pub fn from_samples(xs: &[f64]) -> Result<Self> {
        if xs.is_empty() {
            return Err(Error::InvalidArgument("no accuracy samples".into()));
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        Ok(Accuracy {
            mean,
            std,
            ci95: 1.96 * std / n.sqrt(),
        })
    }
}

/// Per-task accuracies; `None` for heads that were not requested.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskAccuracy {
    pub euclidean: Option<f64>,
    pub relation: Option<f64>,
    /// Mean-prototype descriptors with the Euclidean head.
    pub prototype: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ways: usize,
    pub shots: usize,
    pub queries_per_class: usize,
    pub seed: u64,
    pub per_task: Vec<TaskAccuracy>,
    pub euclidean: Option<Accuracy>,
    pub relation: Option<Accuracy>,
    pub prototype: Accuracy,
}

impl EvalReport {
    pub fn num_tasks(&self) -> usize {
        self.per_task.len()
    }

    pub const CSV_HEADER: &'static str = "task,euclidean,relation,prototype";

    pub fn csv_rows(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        self.per_task
            .iter()
            .enumerate()
            .map(|(i, t)| {
                format!(
                    "{i},{},{},{}",
                    opt(t.euclidean),
                    opt(t.relation),
                    t.prototype
                )
            })
            .collect()
    }
}

/// Index of the nearest descriptor per query row.
pub fn classify_euclidean(queries: &Array, descriptors: &Array) -> Result<Vec<usize>> {
    let mut g = Graph::new();
    let q = g.constant(queries.clone())?;
    let d = g.constant(descriptors.clone())?;
    let logits = euclidean_logits_graph(&mut g, q, d)?;
    Ok(row_argmax(g.value(logits)))
}

fn row_argmax(a: &Array) -> Vec<usize> {
    (0..a.rows()).map(|i| argmax(a.row(i))).collect()
}

fn accuracy(predicted: &[usize], labels: &[usize]) -> f64 {
    let hits = predicted.iter().zip(labels).filter(|(p, y)| p == y).count();
    hits as f64 / labels.len() as f64
}

/// Accuracy of a frozen model on one task.
pub fn evaluate_task(
    model: &ModelConfig,
    params: &ParameterSet,
    batch: &TaskBatch,
    metric: MetricHead,
) -> Result<TaskAccuracy> {
    let mut g = Graph::new();
    let x = g.constant(batch.images.clone())?;
    let feats = embed_graph(&mut g, &model.embedding, params, x, Mode::Eval)?.features;
    let queries = g.gather_rows(feats, &batch.query_rows)?;
    let labels = &batch.query_labels;

    let proto = descriptors_graph(
        &mut g,
        &model.codec,
        params,
        feats,
        &batch.support_rows,
        DescriptorKind::MeanPrototype,
    )?;
    let proto_logits = euclidean_logits_graph(&mut g, queries, proto)?;
    let prototype = accuracy(&row_argmax(g.value(proto_logits)), labels);

    let (mut euclidean, mut relation) = (None, None);
    if metric.euclidean() || metric.relation() {
        let decoded = descriptors_graph(
            &mut g,
            &model.codec,
            params,
            feats,
            &batch.support_rows,
            DescriptorKind::Decoded,
        )?;
        if metric.euclidean() {
            let l = euclidean_logits_graph(&mut g, queries, decoded)?;
            euclidean = Some(accuracy(&row_argmax(g.value(l)), labels));
        }
        if metric.relation() {
            let s = relation_scores_graph(&mut g, params, queries, decoded)?;
            relation = Some(accuracy(&row_argmax(g.value(s)), labels));
        }
    }
    Ok(TaskAccuracy {
        euclidean,
        relation,
        prototype,
    })
}

/// Evaluates `num_tasks` tasks. Task `i` is sampled from its own stream
/// derived from `config.seed`, so results do not depend on thread count.
pub fn evaluate(
    dataset: &FewShotDataset,
    config: &EpisodeConfig,
    model: &ModelConfig,
    params: &ParameterSet,
    num_tasks: usize,
    metric: MetricHead,
) -> Result<EvalReport> {
    if num_tasks == 0 {
        return Err(Error::InvalidArgument("num_tasks must be >= 1".into()));
    }
    config.validate()?;
    if config.queries_per_class == 0 {
        return Err(Error::InvalidArgument(
            "evaluation needs queries_per_class >= 1".into(),
        ));
    }
    dataset.check_capacity(config.shots + config.queries_per_class)?;
    let per_task = (0..num_tasks)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(config.seed, Stream::Evaluation, i as u64);
            let task = sample_episode(dataset, config, &mut rng)?;
            let batch = TaskBatch::from_task(dataset, &task)?;
            evaluate_task(model, params, &batch, metric)
        })
        .collect::<Result<Vec<_>>>()?;
    let summarize = |f: fn(&TaskAccuracy) -> Option<f64>| -> Result<Option<Accuracy>> {
        let xs: Option<Vec<f64>> = per_task.iter().map(f).collect();
        xs.map(|v| Accuracy::from_samples(&v)).transpose()
    };
    Ok(EvalReport {
        ways: config.ways,
        shots: config.shots,
        queries_per_class: config.queries_per_class,
        seed: config.seed,
        euclidean: summarize(|t| t.euclidean)?,
        relation: summarize(|t| t.relation)?,
        prototype: summarize(|t| Some(t.prototype))?.expect("always present"),
        per_task,
    })
}
