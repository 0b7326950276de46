use rand::RngCore;

use super::{clamp_action, step_after_done, uniform01, Env, EnvState, StepOutcome};
use crate::error::Result;

/// Point-mass world with four equally rewarded goals at `(±g, 0)` and
/// `(0, ±g)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultigoalSpec {
    pub goal_distance: f64,
    pub goal_radius: f64,
    pub max_steps: usize,
    pub action_scale: f64,
    pub dt: f64,
    pub start_radius: f64,
    pub goal_bonus: f64,
    pub action_cost: f64,
    pub bound: f64,
}

impl Default for MultigoalSpec {
    fn default() -> Self {
        Self {
            goal_distance: 5.0,
            goal_radius: 0.5,
            max_steps: 100,
            action_scale: 1.0,
            dt: 0.1,
            start_radius: 0.5,
            goal_bonus: 10.0,
            action_cost: 0.05,
            bound: 10.0,
        }
    }
}

impl MultigoalSpec {
    /// Goals in the order +x, +y, -x, -y.
    pub fn goal_positions(&self) -> [[f64; 2]; 4] {
        let g = self.goal_distance;
        [[g, 0.0], [0.0, g], [-g, 0.0], [0.0, -g]]
    }

    /// `(index, distance)` of the goal closest to `p`.
    pub fn nearest_goal(&self, p: [f64; 2]) -> (usize, f64) {
        self.goal_positions()
            .iter()
            .enumerate()
            .map(|(i, g)| (i, ((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2)).sqrt()))
            .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
    }

    /// Reward for arriving at `p` after applying `action`, excluding the
    /// goal bonus.
    pub fn shaped_reward(&self, p: [f64; 2], action: &[f64]) -> f64 {
        let (_, d) = self.nearest_goal(p);
        let a2: f64 = action.iter().map(|a| a * a).sum();
        -d / self.goal_distance - self.action_cost * a2
    }
}

#[derive(Debug, Clone)]
pub struct MultigoalEnv {
    pub spec: MultigoalSpec,
    position: [f64; 2],
    step_index: usize,
    done: bool,
}

impl MultigoalEnv {
    pub fn new(spec: MultigoalSpec) -> Self {
        Self {
            spec,
            position: [0.0, 0.0],
            step_index: 0,
            done: false,
        }
    }

    pub fn position(&self) -> [f64; 2] {
        self.position
    }

    /// Places the agent at `p` and starts a fresh episode there.
    pub fn set_position(&mut self, p: [f64; 2]) -> EnvState {
        self.position = p;
        self.step_index = 0;
        self.done = false;
        self.state()
    }

    fn state(&self) -> EnvState {
        EnvState {
            observation: self.position.to_vec(),
            step_index: self.step_index,
            done: self.done,
        }
    }
}

impl Env for MultigoalEnv {
    fn name(&self) -> &'static str {
        "multigoal"
    }

    fn obs_dim(&self) -> usize {
        2
    }

    fn action_dim(&self) -> usize {
        2
    }

    fn max_steps(&self) -> usize {
        self.spec.max_steps
    }

    fn num_goals(&self) -> usize {
        4
    }

    fn reset(&mut self, rng: &mut dyn RngCore) -> EnvState {
        let r = self.spec.start_radius * uniform01(rng).sqrt();
        let phi = 2.0 * std::f64::consts::PI * uniform01(rng);
        self.set_position([r * phi.cos(), r * phi.sin()])
    }

    fn step(&mut self, action: &[f64]) -> Result<StepOutcome> {
        if self.done {
            return Err(step_after_done(self.name()));
        }
        let a = clamp_action(action, 2)?;
        let s = &self.spec;
        let k = s.action_scale * s.dt;
        self.position = [
            (self.position[0] + k * a[0]).clamp(-s.bound, s.bound),
            (self.position[1] + k * a[1]).clamp(-s.bound, s.bound),
        ];
        self.step_index += 1;

        let mut reward = s.shaped_reward(self.position, &a);
        let (nearest, d) = s.nearest_goal(self.position);
        let goal = (d <= s.goal_radius).then_some(nearest);
        if goal.is_some() {
            reward += s.goal_bonus;
        }
        let truncated = goal.is_none() && self.step_index >= s.max_steps;
        self.done = goal.is_some() || truncated;
        Ok(StepOutcome {
            state: self.state(),
            reward,
            done: self.done,
            truncated,
            goal,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_action_at_origin_costs_one() {
        let mut env = MultigoalEnv::new(MultigoalSpec::default());
        env.set_position([0.0, 0.0]);
        let out = env.step(&[0.0, 0.0]).unwrap();
        assert_eq!(out.reward, -1.0);
        assert!(!out.done);
    }

    #[test]
    fn standing_on_a_goal_terminates_with_bonus() {
        let mut env = MultigoalEnv::new(MultigoalSpec::default());
        env.set_position([0.0, -5.0]);
        let out = env.step(&[0.0, 0.0]).unwrap();
        assert!(out.done && !out.truncated);
        assert_eq!(out.goal, Some(3));
        assert_eq!(out.reward, 10.0);
        assert!(env.step(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn horizon_truncates() {
        let mut env = MultigoalEnv::new(MultigoalSpec::default());
        env.set_position([0.0, 0.0]);
        for i in 0..100 {
            let out = env.step(&[0.0, 0.0]).unwrap();
            assert_eq!(out.done, i == 99);
        }
    }

    #[test]
    fn reset_stays_in_start_disc_and_is_reproducible() {
        let mut env = MultigoalEnv::new(MultigoalSpec::default());
        let mut a = ChaCha8Rng::seed_from_u64(11);
        let mut b = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let sa = env.reset(&mut a);
            let n = (sa.observation[0].powi(2) + sa.observation[1].powi(2)).sqrt();
            assert!(n <= 0.5);
            let sb = env.reset(&mut b);
            assert_eq!(sa, sb);
        }
    }

    #[test]
    fn reset_mean_is_near_origin() {
        let mut env = MultigoalEnv::new(MultigoalSpec::default());
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let n = 10_000;
        let (mut sx, mut sy) = (0.0, 0.0);
        for _ in 0..n {
            let s = env.reset(&mut rng);
            sx += s.observation[0];
            sy += s.observation[1];
        }
        assert!((sx / n as f64).abs() < 0.05);
        assert!((sy / n as f64).abs() < 0.05);
    }

    #[test]
    fn actions_are_clamped_and_positions_bounded() {
        let mut env = MultigoalEnv::new(MultigoalSpec { goal_radius: 0.0, max_steps: 10_000, ..Default::default() });
        env.set_position([9.95, 3.0]);
        let out = env.step(&[50.0, 0.0]).unwrap();
        assert!((out.state.observation[0] - 10.0).abs() < 1e-12);
        let out = env.step(&[50.0, 0.0]).unwrap();
        assert_eq!(out.state.observation[0], 10.0);
    }
}
