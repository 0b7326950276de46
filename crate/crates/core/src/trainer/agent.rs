//! Everything that learns: actor, twin critics and temperature, plus the
//! per-step update and checkpointing of the whole set.

use std::path::Path;

use ndarray::Array2;
use rand::RngCore;
use serde::Serialize;

use super::actor::{actor_update, ActorDraw};
use super::config::{PolicyKind, TrainConfig};
use super::gaussian::GaussianPolicy;
use super::replay::Batch;
use super::temperature::Temperature;
use crate::critic::{CriticEnsemble, StochasticActor};
use crate::diffcore::{NamedTensor, TensorStore};
use crate::envs::EnvKind;
use crate::error::{Result, TrfpError};
use crate::flow_policy::{standard_normal, FlowPolicy, FlowPolicyConfig, HybridSchedule};

#[derive(Debug, Clone, PartialEq)]
pub enum Actor {
    Flow(FlowPolicy),
    Gaussian(GaussianPolicy),
}

impl Actor {
    pub fn kind(&self) -> PolicyKind {
        match self {
            Actor::Flow(_) => PolicyKind::Trfp,
            Actor::Gaussian(_) => PolicyKind::GaussianSac,
        }
    }

    pub fn as_stochastic(&self) -> &dyn StochasticActor {
        match self {
            Actor::Flow(p) => p,
            Actor::Gaussian(p) => p,
        }
    }

    pub fn action_dim(&self) -> usize {
        match self {
            Actor::Flow(p) => p.action_dim(),
            Actor::Gaussian(p) => p.action_dim(),
        }
    }

    /// Deterministic evaluation action from prior draw `u0`. The Gaussian
    /// baseline ignores `u0` and `steps` and returns `tanh(mean)`.
    pub fn eval_action(&self, s: &Array2<f64>, u0: &Array2<f64>, steps: usize) -> Result<Array2<f64>> {
        match self {
            Actor::Flow(p) => p.sample_eval(s, u0, steps),
            Actor::Gaussian(p) => p.mean_action(s),
        }
    }
}

/// Losses and statistics of one update.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UpdateMetrics {
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub fm_loss: Option<f64>,
    pub alpha: f64,
    pub alpha_loss: f64,
    pub mean_surrogate_logp: f64,
    pub mean_sigma: f64,
    pub grad_norm_critic: f64,
    pub grad_norm_actor: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Agent {
    pub env: EnvKind,
    pub actor: Actor,
    pub critic: CriticEnsemble,
    pub temperature: Temperature,
}

impl Agent {
    pub fn new(cfg: &TrainConfig, state_dim: usize, action_dim: usize, rng: &mut impl rand::Rng) -> Result<Self> {
        let actor = match cfg.policy {
            PolicyKind::Trfp => {
                let mut p = FlowPolicy::new(
                    &FlowPolicyConfig {
                        state_dim,
                        action_dim,
                        hidden: cfg.actor_hidden.clone(),
                        sigma_hidden: cfg.sigma_hidden.clone(),
                        sigma_min: cfg.sigma_min,
                        sigma_max: cfg.sigma_max,
                        sigma_init: cfg.sigma_init,
                        schedule: HybridSchedule::new(cfg.k, cfg.l)?,
                    },
                    rng,
                )?;
                p.pin_sigma = cfg.no_tail;
                Actor::Flow(p)
            }
            PolicyKind::GaussianSac => Actor::Gaussian(GaussianPolicy::new(state_dim, action_dim, &cfg.actor_hidden, rng)),
        };
        let critic = CriticEnsemble::new(state_dim, action_dim, &cfg.critic_hidden, cfg.tau_polyak, rng)?;
        let temperature = Temperature::new(cfg.init_alpha, cfg.target_entropy.resolve(action_dim))?;
        Ok(Self {
            env: cfg.env,
            actor,
            critic,
            temperature,
        })
    }

    /// Exploration action for one observation, before clamping.
    pub fn explore(&self, obs: &[f64], rng: &mut dyn RngCore) -> Result<Vec<f64>> {
        let s = Array2::from_shape_vec((1, obs.len()), obs.to_vec())
            .map_err(|e| TrfpError::Shape(e.to_string()))?;
        let (a, _) = self.actor.as_stochastic().sample_with_logp(&s, rng)?;
        Ok(a.row(0).to_vec())
    }

    /// Critic step, Polyak update, actor step, temperature step.
    pub fn update(&mut self, batch: &Batch, cfg: &TrainConfig, rng: &mut dyn RngCore) -> Result<UpdateMetrics> {
        let alpha = self.temperature.alpha();
        let y = self
            .critic
            .bellman_target(batch, self.actor.as_stochastic(), alpha, cfg.gamma, rng)?;
        let cs = self.critic.update(&batch.s, &batch.a, &y, cfg.lr_critic, cfg.grad_clip)?;
        self.critic.soft_update();

        let (actor_loss, fm_loss, logp, mean_sigma, grad_norm_actor) = match &mut self.actor {
            Actor::Flow(p) => {
                let draw = ActorDraw::sample(p, batch.len(), rng);
                let st = actor_update(
                    p,
                    &self.critic,
                    alpha,
                    cfg.effective_lambda_fm(),
                    &batch.s,
                    &draw,
                    cfg.lr_actor,
                    cfg.grad_clip,
                )?;
                (st.loss, st.fm_loss, st.surrogate_logp, st.mean_sigma, st.grad_norm)
            }
            Actor::Gaussian(p) => {
                let eps = standard_normal((batch.len(), p.action_dim()), rng);
                let st = p.update(&self.critic, alpha, &batch.s, &eps, cfg.lr_actor, cfg.grad_clip)?;
                (st.loss, None, st.logp, st.mean_std, st.grad_norm)
            }
        };
        let alpha_loss = self.temperature.update(&logp, cfg.lr_alpha, cfg.grad_clip)?;
        Ok(UpdateMetrics {
            critic_loss: cs.loss,
            actor_loss,
            fm_loss,
            alpha,
            alpha_loss,
            mean_surrogate_logp: logp.mean().unwrap_or(0.0),
            mean_sigma,
            grad_norm_critic: cs.grad_norm,
            grad_norm_actor,
        })
    }

    pub fn to_store(&self) -> TensorStore {
        let mut store = TensorStore::new();
        store.push(NamedTensor::scalar("agent.env", self.env.code()));
        let kind = match self.actor.kind() {
            PolicyKind::Trfp => 0.0,
            PolicyKind::GaussianSac => 1.0,
        };
        store.push(NamedTensor::scalar("agent.policy", kind));
        match &self.actor {
            Actor::Flow(p) => store.extend(p.to_tensors("policy")),
            Actor::Gaussian(p) => store.extend(p.to_tensors("gaussian")),
        }
        store.extend(self.critic.to_tensors("critic"));
        store.extend(self.temperature.to_tensors("temperature"));
        store
    }

    pub fn from_store(store: &TensorStore) -> Result<Self> {
        let env = EnvKind::from_code(store.scalar("agent.env")?)?;
        let actor = match store.scalar("agent.policy")? as i64 {
            0 => Actor::Flow(FlowPolicy::from_tensors(store, "policy")?),
            1 => Actor::Gaussian(GaussianPolicy::from_tensors(store, "gaussian")?),
            other => return Err(TrfpError::Checkpoint(format!("unknown policy code {other}"))),
        };
        Ok(Self {
            env,
            actor,
            critic: CriticEnsemble::from_tensors(store, "critic")?,
            temperature: super::temperature::Temperature::from_tensors(store, "temperature")?,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_store().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_store(&TensorStore::load(path)?)
    }
}
