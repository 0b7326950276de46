//! Maximum-entropy actor-critic training with truncated rectified flow
//! policies.
//!
//! The crate is organised bottom-up:
//!
//! - [`diffcore`]: tape-based reverse-mode differentiation, MLPs, Adam,
//!   checkpoints.
//! - [`envs`]: native continuous-control environments.
//! - [`flow_policy`]: the hybrid ODE-prefix / SDE-tail action sampler, its
//!   surrogate log-likelihood, and flow diagnostics.
//! - [`critic`]: twin soft Q-functions with Polyak targets.
//! - [`trainer`]: replay, the truncated actor objective, temperature tuning,
//!   and the training loop (plus a Gaussian SAC baseline).
//! - [`eval`]: evaluation protocols and Q-guided action selection.

pub mod diffcore;
pub mod envs;
pub mod eval;
pub mod error;
pub mod critic;
pub mod flow_policy;
pub mod trainer;

pub use error::{Result, TrfpError};
