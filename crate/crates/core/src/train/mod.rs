//! Dataset generation, the multi-task objective, Adam and the training loop.

pub mod adam;
pub mod dataset;
pub mod loss;
pub mod trainer;

pub use adam::{AdamConfig, AdamState};
pub use dataset::{generate_dataset, label_all, read_dataset, write_dataset, LabeledEpisode};
pub use loss::{loss, LossParts, LossWeights, StepPrediction};
pub use trainer::{train, EpochRecord, Model, ModelKind, TrainState, TrainingConfig};
