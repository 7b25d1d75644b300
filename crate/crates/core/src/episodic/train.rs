use serde::{Deserialize, Serialize};

use super::dataset::FewShotDataset;
use super::model::{init_model, task_forward, DescriptorKind, ModelConfig, TaskBatch};
use super::sampler::{sample_episode, EpisodeConfig};
use crate::embedding::{apply_batch_stats, Mode};
use crate::error::{Error, Result};
use crate::metric::LossWeights;
use crate::numerics::{optim, Graph, OptimizerConfig, OptimizerState, ParameterSet};
use crate::rng::{stream, RngState, Stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub episode: EpisodeConfig,
    pub optimizer: OptimizerConfig,
    pub weights: LossWeights,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.episode.validate_for_classification()?;
        self.optimizer.validate()?;
        self.weights.validate()
    }
}

/// Exponential moving averages over recent tasks.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunningMetrics {
    pub tasks: u64,
    pub loss: f64,
    pub accuracy_euclidean: f64,
    pub accuracy_relation: f64,
}

const EMA_DECAY: f64 = 0.95;

impl RunningMetrics {
    fn update(&mut self, log: &TaskLog) {
        let a = if self.tasks == 0 { 0.0 } else { EMA_DECAY };
        self.loss = a * self.loss + (1.0 - a) * log.total;
        self.accuracy_euclidean = a * self.accuracy_euclidean + (1.0 - a) * log.accuracy_euclidean;
        self.accuracy_relation = a * self.accuracy_relation + (1.0 - a) * log.accuracy_relation;
        self.tasks += 1;
    }
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub params: ParameterSet,
    pub optimizer: OptimizerState,
    /// Completed episodes.
    pub episode: u64,
    /// Position of the episode sampler.
    pub rng: RngState,
    pub metrics: RunningMetrics,
}

impl TrainState {
    /// Fresh parameters from the init stream; sampling starts at the beginning
    /// of the sampling stream.
    pub fn new(model: &ModelConfig, seed: u64) -> Result<Self> {
        let params = init_model(model, &mut stream(seed, Stream::Init, 0))?;
        Ok(Self::from_params(params, seed))
    }

    pub fn from_params(params: ParameterSet, seed: u64) -> Self {
        TrainState {
            params,
            optimizer: OptimizerState::default(),
            episode: 0,
            rng: RngState::capture(&stream(seed, Stream::Sampling, 0)),
            metrics: RunningMetrics::default(),
        }
    }
}

/// Loss and accuracy of one training task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskLog {
    pub episode: u64,
    pub task: usize,
    pub euclidean: f64,
    pub relation: f64,
    pub regularization: f64,
    pub total: f64,
    pub accuracy_euclidean: f64,
    pub accuracy_relation: f64,
}

impl TaskLog {
    pub const CSV_HEADER: &'static str =
        "episode,task,euclidean,relation,regularization,total,accuracy_euclidean,accuracy_relation";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.episode,
            self.task,
            self.euclidean,
            self.relation,
            self.regularization,
            self.total,
            self.accuracy_euclidean,
            self.accuracy_relation
        )
    }
}

/// A failed training run: the cause, the state before the failing step and
/// the log up to that point.
#[derive(Debug)]
pub struct TrainFailure {
    pub error: Error,
    pub snapshot: TrainState,
    pub log: Vec<TaskLog>,
}

impl std::fmt::Display for TrainFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "training stopped after {} episodes: {}",
            self.snapshot.episode, self.error
        )
    }
}

impl std::error::Error for TrainFailure {}

fn accuracy(predicted: &[usize], labels: &[usize]) -> f64 {
    let hits = predicted.iter().zip(labels).filter(|(p, y)| p == y).count();
    hits as f64 / labels.len() as f64
}

/// One forward/backward/update on `batch`. `state` is left untouched on error.
pub fn train_step(
    model: &ModelConfig,
    cfg: &TrainConfig,
    state: &mut TrainState,
    batch: &TaskBatch,
    task: usize,
) -> Result<TaskLog> {
    let mut g = Graph::new();
    let fwd = task_forward(
        &mut g,
        model,
        &state.params,
        batch,
        Mode::Train,
        &cfg.weights,
        DescriptorKind::Decoded,
    )?;
    let b = fwd.loss.breakdown(&g);
    if !b.total.is_finite() {
        return Err(Error::NonFinite { op: "total_loss" });
    }
    let grads = g.backward(fwd.loss.total)?;
    if !grads.is_finite() {
        return Err(Error::NonFinite { op: "backward" });
    }
    let mut params = state.params.clone();
    let mut opt = state.optimizer.clone();
    optim::step(&cfg.optimizer, &mut opt, &mut params, &grads)?;
    apply_batch_stats(&mut params, &fwd.batch_stats, model.embedding.bn_momentum)?;
    if params.iter().any(|(_, p)| !p.value.is_finite()) {
        return Err(Error::NonFinite { op: "optimizer" });
    }
    state.params = params;
    state.optimizer = opt;
    let log = TaskLog {
        episode: state.episode,
        task,
        euclidean: b.euclidean,
        relation: b.relation,
        regularization: b.regularization,
        total: b.total,
        accuracy_euclidean: accuracy(&b.predicted_euclidean, &batch.query_labels),
        accuracy_relation: accuracy(&b.predicted_relation, &batch.query_labels),
    };
    state.metrics.update(&log);
    Ok(log)
}

/// Runs `cfg.episode.episodes` episodes of `tasks_per_episode` tasks each,
/// one optimizer step per task.
pub fn train(
    dataset: &FewShotDataset,
    model: &ModelConfig,
    cfg: &TrainConfig,
    state: &mut TrainState,
) -> std::result::Result<Vec<TaskLog>, Box<TrainFailure>> {
    let mut log = Vec::new();
    let fail = |error: Error, state: &TrainState, log: Vec<TaskLog>| {
        Box::new(TrainFailure {
            error,
            snapshot: state.clone(),
            log,
        })
    };
    if let Err(e) = cfg.validate().and_then(|_| model.validate()) {
        return Err(fail(e, state, log));
    }
    for _ in 0..cfg.episode.episodes {
        let before = state.clone();
        let mut rng = state.rng.restore();
        for t in 0..cfg.episode.tasks_per_episode {
            let step = sample_episode(dataset, &cfg.episode, &mut rng)
                .and_then(|task| TaskBatch::from_task(dataset, &task))
                .and_then(|batch| train_step(model, cfg, state, &batch, t));
            match step {
                Ok(l) => log.push(l),
                Err(e) => {
                    log.truncate(log.len() - t);
                    *state = before;
                    return Err(fail(e, state, log));
                }
            }
        }
        state.rng = RngState::capture(&rng);
        state.episode += 1;
    }
    Ok(log)
}
