//! Native continuous-control environments behind one [`Env`] contract.
//!
//! Every built-in uses actions in `[-1, 1]^d`; out-of-range actions are
//! clamped by the environment before they affect the dynamics.

mod bandit;
mod export;
mod multigoal;
mod pendulum;
mod reacher;

use std::fmt;
use std::str::FromStr;

use rand::RngCore;
use serde::Serialize;

use crate::error::{Result, TrfpError};

pub use bandit::SingleStateBandit;
pub use export::TrajectoryWriter;
pub use multigoal::{MultigoalEnv, MultigoalSpec};
pub use pendulum::{Pendulum, PendulumState};
pub use reacher::Reacher;

#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub observation: Vec<f64>,
    pub step_index: usize,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub state: EnvState,
    pub reward: f64,
    /// Episode over, for any reason.
    pub done: bool,
    /// Ended by the step limit rather than a terminal state; the value of
    /// the successor should still be bootstrapped.
    pub truncated: bool,
    /// Multigoal only: index of the goal that ended the episode.
    pub goal: Option<usize>,
}

pub trait Env: Send {
    fn name(&self) -> &'static str;
    fn obs_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn max_steps(&self) -> usize;

    fn reset(&mut self, rng: &mut dyn RngCore) -> EnvState;

    /// Advances one step. Calling this after `done` is a usage error.
    fn step(&mut self, action: &[f64]) -> Result<StepOutcome>;

    /// Per-dimension `(low, high)`; every built-in uses `[-1, 1]`.
    fn action_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        (vec![-1.0; self.action_dim()], vec![1.0; self.action_dim()])
    }

    /// Number of distinct goals, for environments that report one.
    fn num_goals(&self) -> usize {
        0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvKind {
    Multigoal,
    Pendulum,
    Reacher,
    Bandit,
}

impl EnvKind {
    pub fn build(self) -> Box<dyn Env> {
        match self {
            EnvKind::Multigoal => Box::new(MultigoalEnv::new(MultigoalSpec::default())),
            EnvKind::Pendulum => Box::new(Pendulum::new()),
            EnvKind::Reacher => Box::new(Reacher::new()),
            EnvKind::Bandit => Box::new(SingleStateBandit::default()),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EnvKind::Multigoal => "multigoal",
            EnvKind::Pendulum => "pendulum",
            EnvKind::Reacher => "reacher",
            EnvKind::Bandit => "bandit",
        }
    }

    pub fn code(self) -> f64 {
        match self {
            EnvKind::Multigoal => 0.0,
            EnvKind::Pendulum => 1.0,
            EnvKind::Reacher => 2.0,
            EnvKind::Bandit => 3.0,
        }
    }

    pub fn from_code(c: f64) -> Result<Self> {
        match c as i64 {
            0 => Ok(EnvKind::Multigoal),
            1 => Ok(EnvKind::Pendulum),
            2 => Ok(EnvKind::Reacher),
            3 => Ok(EnvKind::Bandit),
            _ => Err(TrfpError::Checkpoint(format!("unknown environment code {c}"))),
        }
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EnvKind {
    type Err = TrfpError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multigoal" => Ok(EnvKind::Multigoal),
            "pendulum" => Ok(EnvKind::Pendulum),
            "reacher" => Ok(EnvKind::Reacher),
            "bandit" => Ok(EnvKind::Bandit),
            other => Err(TrfpError::Usage(format!(
                "unknown environment `{other}` (expected multigoal, pendulum, reacher or bandit)"
            ))),
        }
    }
}

pub(crate) fn clamp_action(action: &[f64], dim: usize) -> Result<Vec<f64>> {
    if action.len() != dim {
        return Err(TrfpError::Shape(format!(
            "action has {} components, environment expects {dim}",
            action.len()
        )));
    }
    Ok(action
        .iter()
        .map(|a| if a.is_nan() { 0.0 } else { a.clamp(-1.0, 1.0) })
        .collect())
}

pub(crate) fn step_after_done(name: &str) -> TrfpError {
    TrfpError::Usage(format!("{name}: step called on a finished episode; call reset first"))
}

pub(crate) fn uniform01(rng: &mut dyn RngCore) -> f64 {
    // 53 random mantissa bits.
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}
