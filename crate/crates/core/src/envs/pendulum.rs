use std::f64::consts::PI;

use rand::RngCore;

use super::{clamp_action, step_after_done, uniform01, Env, EnvState, StepOutcome};
use crate::error::Result;

pub const GRAVITY: f64 = 10.0;
pub const MASS: f64 = 1.0;
pub const LENGTH: f64 = 1.0;
pub const DT: f64 = 0.05;
pub const MAX_TORQUE: f64 = 2.0;
pub const MAX_SPEED: f64 = 8.0;
pub const HORIZON: usize = 200;

/// Angle measured from upright, so hanging is `theta = pi`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PendulumState {
    pub theta: f64,
    pub theta_dot: f64,
}

impl PendulumState {
    pub fn angular_acceleration(&self, torque: f64) -> f64 {
        3.0 * GRAVITY / (2.0 * LENGTH) * self.theta.sin() + 3.0 / (MASS * LENGTH * LENGTH) * torque
    }

    /// One explicit Euler step (both updates use the old state), speed
    /// clipped to `MAX_SPEED`.
    pub fn euler_step(&self, torque: f64) -> PendulumState {
        let acc = self.angular_acceleration(torque);
        PendulumState {
            theta: self.theta + self.theta_dot * DT,
            theta_dot: (self.theta_dot + acc * DT).clamp(-MAX_SPEED, MAX_SPEED),
        }
    }
}

pub fn normalize_angle(x: f64) -> f64 {
    (x + PI).rem_euclid(2.0 * PI) - PI
}

/// Torque-limited swing-up.
#[derive(Debug, Clone)]
pub struct Pendulum {
    state: PendulumState,
    step_index: usize,
    done: bool,
}

impl Default for Pendulum {
    fn default() -> Self {
        Self::new()
    }
}

impl Pendulum {
    pub fn new() -> Self {
        Self {
            state: PendulumState { theta: PI, theta_dot: 0.0 },
            step_index: 0,
            done: false,
        }
    }

    pub fn physical_state(&self) -> PendulumState {
        self.state
    }

    pub fn set_state(&mut self, state: PendulumState) -> EnvState {
        self.state = state;
        self.step_index = 0;
        self.done = false;
        self.observe()
    }

    fn observe(&self) -> EnvState {
        EnvState {
            observation: vec![self.state.theta.cos(), self.state.theta.sin(), self.state.theta_dot],
            step_index: self.step_index,
            done: self.done,
        }
    }
}

impl Env for Pendulum {
    fn name(&self) -> &'static str {
        "pendulum"
    }

    fn obs_dim(&self) -> usize {
        3
    }

    fn action_dim(&self) -> usize {
        1
    }

    fn max_steps(&self) -> usize {
        HORIZON
    }

    fn reset(&mut self, rng: &mut dyn RngCore) -> EnvState {
        let theta = PI * (2.0 * uniform01(rng) - 1.0);
        let theta_dot = 2.0 * uniform01(rng) - 1.0;
        self.set_state(PendulumState { theta, theta_dot })
    }

    fn step(&mut self, action: &[f64]) -> Result<StepOutcome> {
        if self.done {
            return Err(step_after_done(self.name()));
        }
        let a = clamp_action(action, 1)?;
        let torque = MAX_TORQUE * a[0];
        let th = normalize_angle(self.state.theta);
        let reward = -(th * th + 0.1 * self.state.theta_dot.powi(2) + 0.001 * torque * torque);
        self.state = self.state.euler_step(torque);
        self.step_index += 1;
        self.done = self.step_index >= HORIZON;
        Ok(StepOutcome {
            state: self.observe(),
            reward,
            done: self.done,
            truncated: self.done,
            goal: None,
        })
    }
}
