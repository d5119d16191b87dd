//! Synthesize-it classifier toolkit.
//!
//! A classifier over `C` real classes plus one fake class is trained with
//! mixup vicinal risk minimisation. After every training pass it synthesises
//! class-conditional samples from its own logits with a Gram-regularised
//! Langevin sampler, and those samples come back as fake-class negatives in
//! the next pass.

pub mod attentive;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
mod kernels;
pub mod metrics;
pub mod mixup;
pub mod model;
pub mod optim;
pub mod rng;
pub mod sampler;
pub mod score;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use model::{Architecture, ClassifierModel, LayerSpec};
pub use tensor::{Tensor, TensorError};
