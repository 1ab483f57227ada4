//! Multi-query associative recall: data, a two-block model trained through
//! the sequential recurrences, and the training loop.

pub mod data;
pub mod experiment;
pub mod model;
pub mod train;

pub use data::{generate_mqar, Dataset, Example, MqarConfig, IGNORE_INDEX};
pub use experiment::{run_experiment, write_artifacts, ExperimentConfig, ExperimentOutcome};
pub use model::{MixPath, ModelConfig, TinyModel};
pub use train::{train, TrainConfig, TrainReport, TrainStatus};
