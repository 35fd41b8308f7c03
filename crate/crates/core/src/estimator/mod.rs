//! Trainable mask estimator: feature assembly, a small feedforward head with
//! sigmoid output, reverse-mode gradients, Adam and the training loop.

pub mod adam;
pub mod features;
pub mod io;
pub mod model;
pub mod train;

pub use adam::{Adam, AdamConfig};
pub use features::{
    assemble_features, read_external_features, write_external_features, FeatureFrames,
};
pub use io::{decode_model, encode_model, load_model, load_model_with, save_model, save_model_with};
pub use model::{Architecture, Dense, EstimatorModel, Gradients};
pub use train::{
    load_checkpoint, save_checkpoint, train, TrainConfig, TrainPair, TrainState, Trainer,
    TrainingLog,
};
