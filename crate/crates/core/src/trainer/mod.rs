//! Off-policy maximum-entropy training: replay, the truncated actor
//! objective with straightening, twin-critic and temperature updates, and
//! the environment loop. A Gaussian soft actor-critic baseline shares the
//! same loop.

pub mod actor;
mod agent;
pub mod bandit;
mod config;
mod gaussian;
mod replay;
mod run;
mod temperature;

pub use agent::{Actor, Agent, UpdateMetrics};
pub use config::{Ablation, PolicyKind, TargetEntropy, TrainConfig, KEYS};
pub use gaussian::{GaussianPolicy, GaussianStats};
pub use replay::{Batch, ReplayBuffer, Transition};
pub use run::{MetricRecord, Trainer};
pub use temperature::Temperature;
