use std::f64::consts::PI;

use rand::RngCore;

use super::{clamp_action, step_after_done, uniform01, Env, EnvState, StepOutcome};
use crate::error::Result;

const LINK1: f64 = 1.0;
const LINK2: f64 = 1.0;
const MAX_JOINT_SPEED: f64 = 2.0;
const DT: f64 = 0.1;
const HORIZON: usize = 50;

/// Planar two-link arm driven by joint-velocity commands.
#[derive(Debug, Clone)]
pub struct Reacher {
    joints: [f64; 2],
    target: [f64; 2],
    step_index: usize,
    done: bool,
}

impl Default for Reacher {
    fn default() -> Self {
        Self::new()
    }
}

impl Reacher {
    pub fn new() -> Self {
        Self {
            joints: [0.0, 0.0],
            target: [1.0, 1.0],
            step_index: 0,
            done: false,
        }
    }

    pub fn fingertip(&self) -> [f64; 2] {
        let [q1, q2] = self.joints;
        [
            LINK1 * q1.cos() + LINK2 * (q1 + q2).cos(),
            LINK1 * q1.sin() + LINK2 * (q1 + q2).sin(),
        ]
    }

    pub fn set_configuration(&mut self, joints: [f64; 2], target: [f64; 2]) -> EnvState {
        self.joints = joints;
        self.target = target;
        self.step_index = 0;
        self.done = false;
        self.observe()
    }

    fn distance(&self) -> f64 {
        let tip = self.fingertip();
        ((tip[0] - self.target[0]).powi(2) + (tip[1] - self.target[1]).powi(2)).sqrt()
    }

    fn observe(&self) -> EnvState {
        let tip = self.fingertip();
        let [q1, q2] = self.joints;
        EnvState {
            observation: vec![
                q1.cos(),
                q1.sin(),
                q2.cos(),
                q2.sin(),
                self.target[0],
                self.target[1],
                tip[0] - self.target[0],
                tip[1] - self.target[1],
            ],
            step_index: self.step_index,
            done: self.done,
        }
    }
}

impl Env for Reacher {
    fn name(&self) -> &'static str {
        "reacher"
    }

    fn obs_dim(&self) -> usize {
        8
    }

    fn action_dim(&self) -> usize {
        2
    }

    fn max_steps(&self) -> usize {
        HORIZON
    }

    fn reset(&mut self, rng: &mut dyn RngCore) -> EnvState {
        let joints = [PI * (2.0 * uniform01(rng) - 1.0), PI * (2.0 * uniform01(rng) - 1.0)];
        // Target uniform over the annulus the arm can reach comfortably.
        let (r_min, r_max) = (0.3_f64, 1.8_f64);
        let r = (r_min * r_min + uniform01(rng) * (r_max * r_max - r_min * r_min)).sqrt();
        let phi = 2.0 * PI * uniform01(rng);
        self.set_configuration(joints, [r * phi.cos(), r * phi.sin()])
    }

    fn step(&mut self, action: &[f64]) -> Result<StepOutcome> {
        if self.done {
            return Err(step_after_done(self.name()));
        }
        let a = clamp_action(action, 2)?;
        for (q, a) in self.joints.iter_mut().zip(&a) {
            *q += MAX_JOINT_SPEED * a * DT;
        }
        self.step_index += 1;
        let reward = -self.distance() - 0.01 * (a[0] * a[0] + a[1] * a[1]);
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
