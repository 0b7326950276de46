//! Hybrid flow policy: a deterministic Heun-integrated prefix on
//! `[0, tau_cut]` followed by `L` Euler-Maruyama-style tail steps
//! `u' = u + v dt + sigma ⊙ eps`. The action is the last latent `u_K`.
//!
//! One velocity network `v(s, u, t)` drives both phases; a separate head
//! produces `sigma(s, u, t) ∈ (sigma_min, sigma_max)` for the tail.

mod chain;
pub mod diagnostics;
mod graph;

use ndarray::{concatenate, Array1, Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::diffcore::{logistic, Activation, MlpParams, NamedTensor, OutputInit, TensorStore};
use crate::error::{Result, TrfpError};

pub use chain::{standard_normal_logpdf, surrogate_logp, tail_step_logpdf, LatentChain};
pub use diagnostics::{
    estimate_divergence, path_deviation, prefix_logdensity_error, straightness, PrefixDensityChange,
};
pub use graph::{GraphChain, PolicyVars};

/// Discretisation of `[0, 1]` into `steps` (K) intervals, the last `tail`
/// (L) of which are stochastic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HybridSchedule {
    pub steps: usize,
    pub tail: usize,
}

impl HybridSchedule {
    pub fn new(steps: usize, tail: usize) -> Result<Self> {
        if steps == 0 || tail == 0 || tail > steps {
            return Err(TrfpError::Usage(format!(
                "hybrid schedule needs 1 <= L <= K, got K={steps}, L={tail}"
            )));
        }
        Ok(Self { steps, tail })
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.steps as f64
    }

    /// Index `k_c = K - L` of the first stochastic step.
    pub fn cutoff(&self) -> usize {
        self.steps - self.tail
    }

    /// Time at which the prefix ends, `(K - L) / K`.
    pub fn tau_cut(&self) -> f64 {
        self.cutoff() as f64 / self.steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 / self.steps as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowPolicyConfig {
    pub state_dim: usize,
    pub action_dim: usize,
    pub hidden: Vec<usize>,
    pub sigma_hidden: Vec<usize>,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub sigma_init: f64,
    pub schedule: HybridSchedule,
}

/// Output of one stochastic tail step.
#[derive(Debug, Clone)]
pub struct TailStep {
    pub next: Array2<f64>,
    pub velocity: Array2<f64>,
    pub sigma: Array2<f64>,
    pub logp: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowPolicy {
    pub velocity: MlpParams,
    pub sigma_head: MlpParams,
    pub sigma_min: f64,
    pub sigma_max: f64,
    /// Ablation: hold sigma at `sigma_min` and ignore the head.
    pub pin_sigma: bool,
    pub schedule: HybridSchedule,
    state_dim: usize,
    action_dim: usize,
}

pub fn standard_normal(shape: (usize, usize), rng: &mut (impl Rng + ?Sized)) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || rng.sample(StandardNormal))
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl FlowPolicy {
    pub fn new(cfg: &FlowPolicyConfig, rng: &mut impl Rng) -> Result<Self> {
        if !(cfg.sigma_min > 0.0 && cfg.sigma_min < cfg.sigma_init && cfg.sigma_init < cfg.sigma_max) {
            return Err(TrfpError::Usage(format!(
                "sigma bounds must satisfy 0 < min < init < max, got {} / {} / {}",
                cfg.sigma_min, cfg.sigma_init, cfg.sigma_max
            )));
        }
        let input = cfg.state_dim + cfg.action_dim + 1;
        let sizes = |hidden: &[usize]| {
            let mut s = vec![input];
            s.extend_from_slice(hidden);
            s.push(cfg.action_dim);
            s
        };
        let velocity = MlpParams::new(
            &sizes(&cfg.hidden),
            Activation::Mish,
            OutputInit::Small { scale: 0.01, bias: 0.0 },
            rng,
        );
        let frac = (cfg.sigma_init - cfg.sigma_min) / (cfg.sigma_max - cfg.sigma_min);
        let sigma_head = MlpParams::new(
            &sizes(&cfg.sigma_hidden),
            Activation::Mish,
            OutputInit::Small { scale: 0.01, bias: logit(frac) },
            rng,
        );
        Self::from_parts(velocity, sigma_head, (cfg.sigma_min, cfg.sigma_max), cfg.schedule)
    }

    /// Assembles a policy from existing networks; both must map
    /// `state_dim + action_dim + 1` inputs to `action_dim` outputs.
    pub fn from_parts(
        velocity: MlpParams,
        sigma_head: MlpParams,
        sigma_bounds: (f64, f64),
        schedule: HybridSchedule,
    ) -> Result<Self> {
        let action_dim = velocity.output_dim();
        let input = velocity.input_dim();
        if input < action_dim + 1 {
            return Err(TrfpError::Shape(format!(
                "velocity net input width {input} cannot hold an action of width {action_dim} plus time"
            )));
        }
        if sigma_head.input_dim() != input || sigma_head.output_dim() != action_dim {
            return Err(TrfpError::Shape(format!(
                "sigma head maps {} -> {}, expected {} -> {}",
                sigma_head.input_dim(),
                sigma_head.output_dim(),
                input,
                action_dim
            )));
        }
        let (sigma_min, sigma_max) = sigma_bounds;
        if !(sigma_min > 0.0 && sigma_min < sigma_max) {
            return Err(TrfpError::Usage(format!("invalid sigma bounds ({sigma_min}, {sigma_max})")));
        }
        Ok(Self {
            velocity,
            sigma_head,
            sigma_min,
            sigma_max,
            pin_sigma: false,
            schedule,
            state_dim: input - action_dim - 1,
            action_dim,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    fn check_batch(&self, s: &Array2<f64>, u: &Array2<f64>) -> Result<()> {
        if s.ncols() != self.state_dim || u.ncols() != self.action_dim || s.nrows() != u.nrows() {
            return Err(TrfpError::Shape(format!(
                "policy expects states [B, {}] and latents [B, {}], got {:?} and {:?}",
                self.state_dim,
                self.action_dim,
                s.dim(),
                u.dim()
            )));
        }
        Ok(())
    }

    fn input(s: &Array2<f64>, u: &Array2<f64>, t: &Array2<f64>) -> Array2<f64> {
        concatenate(Axis(1), &[s.view(), u.view(), t.view()]).expect("row counts checked")
    }

    /// `v(s, u, t)` with one time per row.
    pub fn velocity_at_times(&self, s: &Array2<f64>, u: &Array2<f64>, t: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_batch(s, u)?;
        let v = self.velocity.forward(&Self::input(s, u, t))?;
        if v.iter().any(|x| !x.is_finite()) {
            return Err(TrfpError::TrainingFault("non-finite velocity".into()));
        }
        Ok(v)
    }

    pub fn velocity(&self, s: &Array2<f64>, u: &Array2<f64>, t: f64) -> Result<Array2<f64>> {
        self.velocity_at_times(s, u, &Array2::from_elem((u.nrows(), 1), t))
    }

    pub fn sigma(&self, s: &Array2<f64>, u: &Array2<f64>, t: f64) -> Result<Array2<f64>> {
        self.check_batch(s, u)?;
        if self.pin_sigma {
            return Ok(Array2::from_elem(u.dim(), self.sigma_min));
        }
        let pre = self
            .sigma_head
            .forward(&Self::input(s, u, &Array2::from_elem((u.nrows(), 1), t)))?;
        let span = self.sigma_max - self.sigma_min;
        Ok(pre.mapv(|x| self.sigma_min + span * logistic(x)))
    }

    /// One Heun step of `du = v dt` from `t` to `t + dt`.
    pub fn heun_prefix_step(&self, s: &Array2<f64>, u: &Array2<f64>, t: f64, dt: f64) -> Result<Array2<f64>> {
        let v1 = self.velocity(s, u, t)?;
        let predictor = u + &(&v1 * dt);
        let v2 = self.velocity(s, &predictor, t + dt)?;
        Ok(u + &((v1 + v2) * (0.5 * dt)))
    }

    /// `u' = u + v dt + sigma ⊙ eps`, together with the transition
    /// log-density.
    pub fn sde_tail_step(
        &self,
        s: &Array2<f64>,
        u: &Array2<f64>,
        t: f64,
        dt: f64,
        eps: &Array2<f64>,
    ) -> Result<TailStep> {
        let velocity = self.velocity(s, u, t)?;
        let sigma = self.sigma(s, u, t)?;
        let next = u + &(&velocity * dt) + &(&sigma * eps);
        let logp = tail_step_logpdf(&sigma, eps);
        Ok(TailStep {
            next,
            velocity,
            sigma,
            logp,
        })
    }

    /// Runs the hybrid sampler from a given prior draw and tail noise.
    pub fn sample_hybrid_with_noise(
        &self,
        s: &Array2<f64>,
        u0: Array2<f64>,
        noises: Vec<Array2<f64>>,
        schedule: HybridSchedule,
    ) -> Result<LatentChain> {
        if noises.len() != schedule.tail {
            return Err(TrfpError::Shape(format!(
                "{} tail noises supplied for L={}",
                noises.len(),
                schedule.tail
            )));
        }
        let dt = schedule.dt();
        let prior_logp = standard_normal_logpdf(&u0);
        let mut u = vec![u0];
        for k in 0..schedule.cutoff() {
            let next = self.heun_prefix_step(s, &u[k], schedule.time(k), dt)?;
            u.push(next);
        }
        let mut velocities = Vec::with_capacity(schedule.tail);
        let mut sigmas = Vec::with_capacity(schedule.tail);
        let mut tail_logps = Vec::with_capacity(schedule.tail);
        for (j, eps) in noises.iter().enumerate() {
            let k = schedule.cutoff() + j;
            let step = self.sde_tail_step(s, &u[k], schedule.time(k), dt, eps)?;
            u.push(step.next);
            velocities.push(step.velocity);
            sigmas.push(step.sigma);
            tail_logps.push(step.logp);
        }
        Ok(LatentChain {
            schedule,
            u,
            noises,
            velocities,
            sigmas,
            prior_logp,
            tail_logps,
        })
    }

    /// Draws `u_0 ~ N(0, I)` and the tail noise, then runs the sampler.
    pub fn sample_hybrid(
        &self,
        s: &Array2<f64>,
        rng: &mut (impl Rng + ?Sized),
        schedule: HybridSchedule,
    ) -> Result<(Array2<f64>, LatentChain)> {
        let shape = (s.nrows(), self.action_dim);
        let u0 = standard_normal(shape, rng);
        let noises = (0..schedule.tail).map(|_| standard_normal(shape, rng)).collect();
        let chain = self.sample_hybrid_with_noise(s, u0, noises, schedule)?;
        Ok((chain.action().clone(), chain))
    }

    /// Every latent of the noise-free rollout, `u_0 ..= u_K`: Heun steps on
    /// the prefix, mean steps `u + v dt` on the tail.
    pub fn deterministic_trajectory(
        &self,
        s: &Array2<f64>,
        u0: &Array2<f64>,
        schedule: HybridSchedule,
    ) -> Result<Vec<Array2<f64>>> {
        let dt = schedule.dt();
        let mut points = Vec::with_capacity(schedule.steps + 1);
        points.push(u0.clone());
        let mut u = u0.clone();
        for k in 0..schedule.steps {
            let t = schedule.time(k);
            u = if k < schedule.cutoff() {
                self.heun_prefix_step(s, &u, t, dt)?
            } else {
                let v = self.velocity(s, &u, t)?;
                &u + &(v * dt)
            };
            points.push(u.clone());
        }
        Ok(points)
    }

    /// Endpoint of the noise-free rollout; the self-distillation target.
    pub fn deterministic_rollout(
        &self,
        s: &Array2<f64>,
        u0: &Array2<f64>,
        schedule: HybridSchedule,
    ) -> Result<Array2<f64>> {
        Ok(self
            .deterministic_trajectory(s, u0, schedule)?
            .pop()
            .expect("trajectory has K+1 points"))
    }

    /// Evaluation-time action: `steps` Heun steps of `du = v dt` over the
    /// whole interval `[0, 1]`, no tail noise.
    pub fn sample_eval(&self, s: &Array2<f64>, u0: &Array2<f64>, steps: usize) -> Result<Array2<f64>> {
        if steps == 0 {
            return Err(TrfpError::Usage("evaluation needs at least one integration step".into()));
        }
        let dt = 1.0 / steps as f64;
        let mut u = u0.clone();
        for k in 0..steps {
            u = self.heun_prefix_step(s, &u, k as f64 * dt, dt)?;
        }
        Ok(u)
    }

    /// Batch mean of `||v(s, x_t, t) - (u_tg - u_0)||^2` with
    /// `x_t = t u_tg + (1 - t) u_0` and one `t` per row.
    pub fn straightening_loss(
        &self,
        s: &Array2<f64>,
        u0: &Array2<f64>,
        u_tg: &Array2<f64>,
        t: &Array1<f64>,
    ) -> Result<f64> {
        let tcol = t.view().insert_axis(Axis(1)).to_owned();
        let xt = &u_tg.view() * &tcol + &(u0 * &tcol.mapv(|t| 1.0 - t));
        let v = self.velocity_at_times(s, &xt, &tcol)?;
        let diff = v - (u_tg - u0);
        Ok(diff.mapv(|x| x * x).sum() / u0.nrows() as f64)
    }

    pub fn to_tensors(&self, prefix: &str) -> Vec<NamedTensor> {
        let mut out = self.velocity.to_tensors(&format!("{prefix}.velocity"));
        out.extend(self.sigma_head.to_tensors(&format!("{prefix}.sigma")));
        out.push(NamedTensor::scalar(format!("{prefix}.sigma_min"), self.sigma_min));
        out.push(NamedTensor::scalar(format!("{prefix}.sigma_max"), self.sigma_max));
        out.push(NamedTensor::scalar(format!("{prefix}.pin_sigma"), f64::from(u8::from(self.pin_sigma))));
        out.push(NamedTensor::scalar(format!("{prefix}.steps"), self.schedule.steps as f64));
        out.push(NamedTensor::scalar(format!("{prefix}.tail"), self.schedule.tail as f64));
        out
    }

    pub fn from_tensors(store: &TensorStore, prefix: &str) -> Result<Self> {
        let velocity = MlpParams::from_tensors(store, &format!("{prefix}.velocity"))?;
        let sigma_head = MlpParams::from_tensors(store, &format!("{prefix}.sigma"))?;
        let bounds = (
            store.scalar(&format!("{prefix}.sigma_min"))?,
            store.scalar(&format!("{prefix}.sigma_max"))?,
        );
        let schedule = HybridSchedule::new(
            store.scalar(&format!("{prefix}.steps"))? as usize,
            store.scalar(&format!("{prefix}.tail"))? as usize,
        )?;
        let mut policy = Self::from_parts(velocity, sigma_head, bounds, schedule)?;
        policy.pin_sigma = store.scalar(&format!("{prefix}.pin_sigma"))? != 0.0;
        Ok(policy)
    }
}
