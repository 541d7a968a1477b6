//! Post-hoc evidential meta-models for frozen classifiers.
//!
//! The pipeline trains (or loads) a small base classifier, finds the layers
//! that carry most of its relevance mass with LRP-ε, builds a
//! relevance-targeted salt-and-pepper curriculum with soft targets, fits a
//! Dirichlet meta-model on the selected activations and scores ID / OOD /
//! adversarial separation.

pub mod attacks;
pub mod curriculum;
pub mod data;
pub mod error;
pub mod evidential;
pub mod framing;
pub mod metrics;
pub mod nn;
pub mod par;
pub mod saliency;
pub mod special;
pub mod tensor;

pub use data::{holdout, load_idx, split, synth_blobs, BlobSpec, Dataset, SplitSizes, SplitSpec};
pub use error::{Error, Result};
pub use nn::{Adam, Architecture, ForwardTrace, Layer, Model, Parameterized};
pub use tensor::Tensor;
