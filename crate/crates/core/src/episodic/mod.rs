//! Datasets, K-way C-shot episode sampling, and the training and evaluation
//! loops.

mod dataset;
mod eval;
mod model;
mod sampler;
mod synthetic;
mod train;

pub use dataset::{
    quantize, write_csv, ClassImages, DatasetBundle, FewShotDataset, Manifest, Split, MANIFEST_FILE,
};
pub use eval::{
    classify_euclidean, evaluate, evaluate_task, Accuracy, EvalReport, MetricHead, TaskAccuracy,
};
pub use model::{
    class_descriptor, descriptors_graph, init_model, regularized_names, task_forward,
    DescriptorKind, ModelConfig, TaskBatch, TaskForward,
};
pub use sampler::{sample_episode, EpisodeConfig, EpisodeTask};
pub use synthetic::{make_synthetic_bundle, make_synthetic_dataset, SyntheticConfig};
pub use train::{
    train, train_step, RunningMetrics, TaskLog, TrainConfig, TrainFailure, TrainState,
};
