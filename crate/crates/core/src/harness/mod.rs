//! Desk-scale pipeline: synthetic speakers, a small frame encoder in front of
//! the pooling layer, SGD training and trial evaluation.

mod data;
mod eval;
mod model;
mod optim;
mod train;

pub use data::{generate_dataset, nearest_centroid_accuracy, Dataset, Split, SyntheticSpeakerSpec, Utterance};
pub use eval::{evaluate, evaluate_scores, score_trials};
pub use model::{Dense, EncoderConfig, LossGrad, Model, ModelConfig, PoolingChoice, PoolingLayer};
pub use optim::{PlateauScheduler, Sgd};
pub use train::{train, train_model, LossTrace, TrainConfig, TrainOutcome, Validation};
