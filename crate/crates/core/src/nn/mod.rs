//! Tensor layers, reverse-mode gradients, Adam and base-classifier training.

pub mod arch;
pub mod layer;
pub mod model;
pub mod optim;
pub mod serialize;
pub mod train;

pub use arch::Architecture;
pub use layer::{Activation, Conv2d, Dense, Layer, Pool2d};
pub use model::{
    cross_entropy, grad_input, grad_params, BackwardOptions, ForwardTrace, Gradients, Model, Objective,
    Parameterized,
};
pub use optim::Adam;
pub use serialize::{load_model, read_model, save_model, write_model};
pub use train::{accuracy, train_base, EpochStats, TrainConfig};
