//! Feedforward networks, training and checkpoints.

pub mod checkpoint;
pub mod gradcheck;
pub mod model;
pub mod nets;
pub mod train;

pub use checkpoint::{load_model, load_state, read_model, save_model, save_state, write_model};
pub use gradcheck::{gradient_check, GradCheckReport};
pub use model::{Activation, Affine, Architecture, BranchSpec, Dense, LayerSpec, MlpModel};
pub use nets::{lcnet_architecture, lcnet_predict, lcnet_predict_batch, lenet_architecture, lenet_features, lenet_predict, LenetLocator};
pub use train::{train, Sample, Samples, TrainConfig, TrainState, Trainer};
