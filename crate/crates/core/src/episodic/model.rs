use rand::Rng;
use serde::{Deserialize, Serialize};

use super::dataset::FewShotDataset;
use super::sampler::EpisodeTask;
use crate::class_codec::{self, CodecConfig, CodecVars};
use crate::embedding::{self, EmbeddingConfig, Mode};
use crate::error::{Error, Result};
use crate::metric::{self, LossVars, LossWeights, RelationConfig};
use crate::numerics::{Array, BatchStats, Graph, ParameterSet, Var};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub embedding: EmbeddingConfig,
    pub codec: CodecConfig,
    pub relation: RelationConfig,
}

impl ModelConfig {
    pub fn feature_dim(&self) -> Result<usize> {
        self.embedding.feature_dim()
    }

    pub fn validate(&self) -> Result<()> {
        self.embedding.validate()?;
        self.codec.validate()?;
        if self.relation.hidden == 0 {
            return Err(Error::InvalidArgument(
                "relation hidden width must be > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Embedding, codec and relation parameters in one set.
pub fn init_model(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<ParameterSet> {
    cfg.validate()?;
    let d = cfg.feature_dim()?;
    let mut p = embedding::init_params(&cfg.embedding, rng)?;
    p.merge(class_codec::init_params(d, &cfg.codec, rng)?)?;
    p.merge(metric::init_relation_params(d, &cfg.relation, rng)?)?;
    Ok(p)
}

/// Parameters under the norm penalty: encoder, decoder and relation module.
pub fn regularized_names(params: &ParameterSet) -> Vec<String> {
    params
        .iter()
        .filter(|(n, p)| {
            p.trainable && (n.starts_with(class_codec::PREFIX) || n.starts_with(metric::PREFIX))
        })
        .map(|(n, _)| n.clone())
        .collect()
}

/// How class descriptors are built from support features.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DescriptorKind {
    Decoded,
    MeanPrototype,
}

/// Images of one task stacked support-first, class-major.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskBatch {
    /// `[S + Q, C, H, W]`
    pub images: Array,
    /// Rows of `images` holding each class's support samples.
    pub support_rows: Vec<Vec<usize>>,
    /// Rows of `images` holding the queries.
    pub query_rows: Vec<usize>,
    pub query_labels: Vec<usize>,
}

impl TaskBatch {
    pub fn from_task(dataset: &FewShotDataset, task: &EpisodeTask) -> Result<Self> {
        let support = task.support_items();
        let query = task.query_items();
        let mut items = support.clone();
        items.extend_from_slice(&query);
        let images = dataset.stack(&items)?;
        let mut support_rows = Vec::with_capacity(task.ways());
        let mut row = 0;
        for s in &task.support {
            support_rows.push((row..row + s.len()).collect());
            row += s.len();
        }
        Ok(TaskBatch {
            images,
            support_rows,
            query_rows: (row..row + query.len()).collect(),
            query_labels: task.query_labels(),
        })
    }
}

/// Tape nodes of one task's forward pass.
pub struct TaskForward {
    pub loss: LossVars,
    /// `[K, D]`
    pub descriptors: Var,
    /// `[Q, D]`
    pub queries: Var,
    pub batch_stats: Vec<(String, BatchStats)>,
}

/// `[K, D]` descriptors from `[B, D]` features, one per class row group.
pub fn descriptors_graph(
    g: &mut Graph,
    codec: &CodecConfig,
    params: &ParameterSet,
    features: Var,
    support_rows: &[Vec<usize>],
    kind: DescriptorKind,
) -> Result<Var> {
    let vars = match kind {
        DescriptorKind::Decoded => Some(CodecVars::bind(g, params, codec)?),
        DescriptorKind::MeanPrototype => None,
    };
    let mut rows = Vec::with_capacity(support_rows.len());
    for idx in support_rows {
        let e = g.gather_rows(features, idx)?;
        rows.push(match &vars {
            Some(v) => class_codec::describe_graph(g, v, e)?,
            None => class_codec::mean_prototype_graph(g, e)?,
        });
    }
    g.concat(&rows, 0)
}

/// Embeds a task, builds descriptors and the weighted total loss.
pub fn task_forward(
    g: &mut Graph,
    cfg: &ModelConfig,
    params: &ParameterSet,
    batch: &TaskBatch,
    mode: Mode,
    weights: &LossWeights,
    kind: DescriptorKind,
) -> Result<TaskForward> {
    let x = g.constant(batch.images.clone())?;
    let emb = embedding::embed_graph(g, &cfg.embedding, params, x, mode)?;
    let descriptors = descriptors_graph(
        g,
        &cfg.codec,
        params,
        emb.features,
        &batch.support_rows,
        kind,
    )?;
    let queries = g.gather_rows(emb.features, &batch.query_rows)?;
    let regularized = regularized_names(params);
    let loss = metric::total_loss_graph(
        g,
        params,
        &regularized,
        queries,
        descriptors,
        &batch.query_labels,
        weights,
    )?;
    Ok(TaskForward {
        loss,
        descriptors,
        queries,
        batch_stats: emb.batch_stats,
    })
}

/// Plain-value descriptor of one class's support images `[C, ch, H, W]`,
/// embedded in evaluation mode.
pub fn class_descriptor(
    cfg: &ModelConfig,
    params: &ParameterSet,
    images: &Array,
    kind: DescriptorKind,
) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let x = g.constant(images.clone())?;
    let emb = embedding::embed_graph(&mut g, &cfg.embedding, params, x, Mode::Eval)?;
    let rows: Vec<usize> = (0..images.shape()[0]).collect();
    let d = descriptors_graph(&mut g, &cfg.codec, params, emb.features, &[rows], kind)?;
    Ok(g.value(d).data().to_vec())
}
