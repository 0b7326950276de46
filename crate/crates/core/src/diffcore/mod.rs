//! Minimal reverse-mode differentiation engine with dense networks, Adam,
//! and a binary checkpoint format.

pub mod activation;
pub mod adam;
pub mod checkpoint;
pub mod mlp;
pub mod tape;

pub use activation::{logistic, mish, softplus};
pub use adam::{clip_global_norm, global_norm, AdamState};
pub use checkpoint::{NamedTensor, TensorStore};
pub use mlp::{Activation, MlpParams, MlpVars, OutputInit};
pub use tape::{stop_gradient, Gradients, Tape, Var};
