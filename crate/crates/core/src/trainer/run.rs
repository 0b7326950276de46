//! The environment loop: warmup with uniform actions, then one update per
//! environment step, windowed metric records and periodic checkpoints.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::agent::{Agent, UpdateMetrics};
use super::config::TrainConfig;
use super::replay::{ReplayBuffer, Transition};
use crate::envs::{Env, EnvState};
use crate::error::{Result, TrfpError};

/// One JSONL line: the step index plus metrics averaged over the updates
/// and episodes of the window that ends at `step`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRecord {
    pub step: usize,
    pub phase: &'static str,
    pub episodes: usize,
    /// Mean return of episodes finished inside the window.
    pub episode_return: Option<f64>,
    pub updates: usize,
    pub critic_loss: Option<f64>,
    pub actor_loss: Option<f64>,
    pub fm_loss: Option<f64>,
    pub alpha: Option<f64>,
    pub alpha_loss: Option<f64>,
    pub mean_surrogate_logp: Option<f64>,
    pub mean_sigma: Option<f64>,
    pub grad_norm_critic: Option<f64>,
    pub grad_norm_actor: Option<f64>,
}

#[derive(Debug, Default, Clone)]
struct Window {
    returns: Vec<f64>,
    sums: [f64; 9],
    fm_count: usize,
    updates: usize,
}

impl Window {
    fn add(&mut self, m: &UpdateMetrics) {
        let vals = [
            m.critic_loss,
            m.actor_loss,
            m.fm_loss.unwrap_or(0.0),
            m.alpha,
            m.alpha_loss,
            m.mean_surrogate_logp,
            m.mean_sigma,
            m.grad_norm_critic,
            m.grad_norm_actor,
        ];
        for (s, v) in self.sums.iter_mut().zip(vals) {
            *s += v;
        }
        self.fm_count += usize::from(m.fm_loss.is_some());
        self.updates += 1;
    }

    fn record(&self, step: usize, phase: &'static str, episodes: usize) -> MetricRecord {
        let mean = |i: usize| (self.updates > 0).then(|| self.sums[i] / self.updates as f64);
        MetricRecord {
            step,
            phase,
            episodes,
            episode_return: (!self.returns.is_empty()).then(|| self.returns.iter().sum::<f64>() / self.returns.len() as f64),
            updates: self.updates,
            critic_loss: mean(0),
            actor_loss: mean(1),
            fm_loss: (self.fm_count > 0).then(|| self.sums[2] / self.fm_count as f64),
            alpha: mean(3),
            alpha_loss: mean(4),
            mean_surrogate_logp: mean(5),
            mean_sigma: mean(6),
            grad_norm_critic: mean(7),
            grad_norm_actor: mean(8),
        }
    }
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub seed: u64,
    pub agent: Agent,
    pub buffer: ReplayBuffer,
    env: Box<dyn Env>,
    env_rng: ChaCha8Rng,
    agent_rng: ChaCha8Rng,
    state: EnvState,
    step: usize,
    episodes: usize,
    episode_return: f64,
    window: Window,
    last_update: Option<UpdateMetrics>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut env = cfg.env.build();
        let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
        let mut env_rng = ChaCha8Rng::seed_from_u64(seed);
        env_rng.set_stream(1);
        let mut agent_rng = ChaCha8Rng::seed_from_u64(seed);
        agent_rng.set_stream(2);
        let agent = Agent::new(&cfg, env.obs_dim(), env.action_dim(), &mut init_rng)?;
        let state = env.reset(&mut env_rng);
        Ok(Self {
            buffer: ReplayBuffer::new(cfg.buffer)?,
            cfg,
            seed,
            agent,
            env,
            env_rng,
            agent_rng,
            state,
            step: 0,
            episodes: 0,
            episode_return: 0.0,
            window: Window::default(),
            last_update: None,
        })
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn last_update(&self) -> Option<&UpdateMetrics> {
        self.last_update.as_ref()
    }

    fn in_warmup(&self) -> bool {
        self.step < self.cfg.warmup_random_steps
    }

    /// One environment step followed by one update once warmup is over and
    /// the buffer holds a batch.
    pub fn step(&mut self) -> Result<Option<UpdateMetrics>> {
        let obs = self.state.observation.clone();
        let dim = self.env.action_dim();
        let raw = if self.in_warmup() {
            (0..dim).map(|_| self.agent_rng.random_range(-1.0..=1.0)).collect()
        } else {
            self.agent.explore(&obs, &mut self.agent_rng)?
        };
        let action: Vec<f64> = raw.iter().map(|x| if x.is_nan() { 0.0 } else { x.clamp(-1.0, 1.0) }).collect();
        let out = self.env.step(&action)?;
        self.episode_return += out.reward;
        self.buffer.push(Transition {
            s: obs,
            a: action,
            r: out.reward,
            s_next: out.state.observation.clone(),
            done: out.done && !out.truncated,
        });
        if out.done {
            self.window.returns.push(self.episode_return);
            self.episodes += 1;
            self.episode_return = 0.0;
            self.state = self.env.reset(&mut self.env_rng);
        } else {
            self.state = out.state;
        }
        self.step += 1;

        if self.step <= self.cfg.warmup_random_steps || self.buffer.len() < self.cfg.batch {
            return Ok(None);
        }
        let batch = self.buffer.sample(&mut self.agent_rng, self.cfg.batch)?;
        let m = self
            .agent
            .update(&batch, &self.cfg, &mut self.agent_rng)
            .map_err(|e| match e {
                TrfpError::TrainingFault(msg) => TrfpError::TrainingFault(format!("step {}: {msg}", self.step)),
                other => other,
            })?;
        self.window.add(&m);
        self.last_update = Some(m.clone());
        Ok(Some(m))
    }

    /// Runs to `total_steps`, calling `on_record` every `log_interval`
    /// steps and `on_checkpoint` every `checkpoint_interval` steps.
    pub fn run(
        &mut self,
        mut on_record: impl FnMut(&MetricRecord) -> Result<()>,
        mut on_checkpoint: impl FnMut(usize, &Agent) -> Result<()>,
    ) -> Result<()> {
        while self.step < self.cfg.total_steps {
            self.step()?;
            if self.step % self.cfg.log_interval == 0 || self.step == self.cfg.total_steps {
                let phase = if self.window.updates == 0 { "warmup" } else { "train" };
                let rec = self.window.record(self.step, phase, self.episodes);
                on_record(&rec)?;
                self.window = Window::default();
            }
            if self.step % self.cfg.checkpoint_interval == 0 {
                on_checkpoint(self.step, &self.agent)?;
            }
        }
        Ok(())
    }
}
