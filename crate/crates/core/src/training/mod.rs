//! Optimizer, metrics and the repeated train/test protocol.

mod experiment;
mod metrics;
mod optim;
mod report;
mod split;

pub use experiment::{
    assign_split, evaluate, predict, run_experiment, sample_extents, train_model, train_run, AugmentConfig,
    ExperimentConfig, ModelChoice, Precision, ProtocolConfig, RunResult, RunStatus,
};
pub use metrics::{accuracy, per_class_precision, ConfusionMatrix};
pub use optim::Sgd;
pub use report::{Aggregate, MetricsReport};
pub use split::{split_indices, validate_fraction, DEFAULT_TRAIN_FRACTION};
