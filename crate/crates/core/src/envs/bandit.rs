use rand::RngCore;

use super::{clamp_action, step_after_done, Env, EnvState, StepOutcome};
use crate::error::Result;

/// One-state, one-step task whose reward is `temperature * log m(a)`, where
/// `m` is an equal-weight isotropic Gaussian mixture. The Boltzmann policy
/// `exp(r / temperature)` is therefore exactly `m`.
#[derive(Debug, Clone, PartialEq)]
pub struct SingleStateBandit {
    pub modes: Vec<[f64; 2]>,
    pub width: f64,
    pub temperature: f64,
    done: bool,
}

impl Default for SingleStateBandit {
    fn default() -> Self {
        Self::new(vec![[-0.5, 0.0], [0.5, 0.0]], 0.15, 0.2)
    }
}

impl SingleStateBandit {
    pub fn new(modes: Vec<[f64; 2]>, width: f64, temperature: f64) -> Self {
        Self {
            modes,
            width,
            temperature,
            done: false,
        }
    }

    /// Log-density of the mixture at `a`.
    pub fn mixture_log_density(&self, a: [f64; 2]) -> f64 {
        let var = self.width * self.width;
        let log_norm = -(2.0 * std::f64::consts::PI * var).ln() - (self.modes.len() as f64).ln();
        let exps: Vec<f64> = self
            .modes
            .iter()
            .map(|m| -((a[0] - m[0]).powi(2) + (a[1] - m[1]).powi(2)) / (2.0 * var))
            .collect();
        let top = exps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        top + exps.iter().map(|e| (e - top).exp()).sum::<f64>().ln() + log_norm
    }

    pub fn reward(&self, a: [f64; 2]) -> f64 {
        self.temperature * self.mixture_log_density(a)
    }
}

impl Env for SingleStateBandit {
    fn name(&self) -> &'static str {
        "bandit"
    }

    fn obs_dim(&self) -> usize {
        1
    }

    fn action_dim(&self) -> usize {
        2
    }

    fn max_steps(&self) -> usize {
        1
    }

    fn reset(&mut self, _rng: &mut dyn RngCore) -> EnvState {
        self.done = false;
        EnvState {
            observation: vec![1.0],
            step_index: 0,
            done: false,
        }
    }

    fn step(&mut self, action: &[f64]) -> Result<StepOutcome> {
        if self.done {
            return Err(step_after_done(self.name()));
        }
        let a = clamp_action(action, 2)?;
        self.done = true;
        Ok(StepOutcome {
            state: EnvState {
                observation: vec![1.0],
                step_index: 1,
                done: true,
            },
            reward: self.reward([a[0], a[1]]),
            done: true,
            truncated: false,
            goal: None,
        })
    }
}
