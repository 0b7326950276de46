//! Twin soft Q-functions with Polyak-averaged targets.

use ndarray::{concatenate, Array1, Array2, Axis, Zip};
use rand::{Rng, RngCore};

use crate::diffcore::{clip_global_norm, Activation, MlpParams, NamedTensor, OutputInit, TensorStore, Tape, Var};
use crate::error::{Result, TrfpError};
use crate::flow_policy::FlowPolicy;
use crate::trainer::Batch;

/// A policy that can propose actions together with the log-likelihood used
/// in entropy terms.
pub trait StochasticActor {
    fn sample_with_logp(&self, s: &Array2<f64>, rng: &mut dyn RngCore) -> Result<(Array2<f64>, Array1<f64>)>;
}

impl StochasticActor for FlowPolicy {
    /// Hybrid sampler action and its surrogate log-likelihood.
    fn sample_with_logp(&self, s: &Array2<f64>, rng: &mut dyn RngCore) -> Result<(Array2<f64>, Array1<f64>)> {
        let (a, chain) = self.sample_hybrid(s, rng, self.schedule)?;
        Ok((a, chain.surrogate_logp()))
    }
}

/// Something that scores `(s, a)` pairs pessimistically, both as plain
/// arrays and on a tape.
pub trait QFunction {
    fn min_q(&self, s: &Array2<f64>, a: &Array2<f64>) -> Result<Array1<f64>>;

    /// `[B, 1]` scores; adjoints reach `a` but never the scorer itself.
    fn min_q_var<'t>(&self, s: Var<'t>, a: Var<'t>) -> Result<Var<'t>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Which {
    Q1,
    Q2,
    Q1Target,
    Q2Target,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CriticStats {
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriticEnsemble {
    pub q1: MlpParams,
    pub q2: MlpParams,
    pub q1_target: MlpParams,
    pub q2_target: MlpParams,
    pub tau_polyak: f64,
}

/// Clamps every entry into `[-1, 1]`, the action box of the built-in
/// environments.
pub fn clamp_unit(a: &Array2<f64>) -> Array2<f64> {
    a.mapv(|x| if x.is_nan() { 0.0 } else { x.clamp(-1.0, 1.0) })
}

/// `r + (1 - done) * gamma * (min_q_next - alpha * logp_next)`.
pub fn soft_target(
    r: &Array1<f64>,
    done: &Array1<f64>,
    min_q_next: &Array1<f64>,
    logp_next: &Array1<f64>,
    alpha: f64,
    gamma: f64,
) -> Array1<f64> {
    let mut y = r.clone();
    Zip::from(&mut y)
        .and(done)
        .and(min_q_next)
        .and(logp_next)
        .for_each(|y, &d, &q, &lp| *y += (1.0 - d) * gamma * (q - alpha * lp));
    y
}

impl QFunction for CriticEnsemble {
    /// Elementwise `min(Q1, Q2)` of the online critics.
    fn min_q(&self, s: &Array2<f64>, a: &Array2<f64>) -> Result<Array1<f64>> {
        let q1 = self.q_value(s, a, Which::Q1)?;
        let q2 = self.q_value(s, a, Which::Q2)?;
        Ok(Zip::from(&q1).and(&q2).map_collect(|a, b| a.min(*b)))
    }

    /// Critic parameters enter as fresh leaves whose adjoints are
    /// discarded, so the actor loss never moves the critics.
    fn min_q_var<'t>(&self, s: Var<'t>, a: Var<'t>) -> Result<Var<'t>> {
        let tape = s.tape();
        let x = tape.concat(&[s, a]);
        let q1 = self.q1.forward_var(&self.q1.register(tape), x)?;
        let q2 = self.q2.forward_var(&self.q2.register(tape), x)?;
        Ok(q1.minimum(q2))
    }
}

impl CriticEnsemble {
    pub fn new(state_dim: usize, action_dim: usize, hidden: &[usize], tau_polyak: f64, rng: &mut impl Rng) -> Result<Self> {
        if !(tau_polyak > 0.0 && tau_polyak <= 1.0) {
            return Err(TrfpError::Usage(format!("tau_polyak must lie in (0, 1], got {tau_polyak}")));
        }
        let mut sizes = vec![state_dim + action_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        let q1 = MlpParams::new(&sizes, Activation::Mish, OutputInit::HeUniform, rng);
        let q2 = MlpParams::new(&sizes, Activation::Mish, OutputInit::HeUniform, rng);
        Ok(Self {
            q1_target: q1.clone(),
            q2_target: q2.clone(),
            q1,
            q2,
            tau_polyak,
        })
    }

    /// Builds an ensemble from two online nets; targets start as copies.
    pub fn from_nets(q1: MlpParams, q2: MlpParams, tau_polyak: f64) -> Result<Self> {
        if q1.input_dim() != q2.input_dim() || q1.output_dim() != 1 || q2.output_dim() != 1 {
            return Err(TrfpError::Shape("critics must share input width and output a scalar".into()));
        }
        Ok(Self {
            q1_target: q1.clone(),
            q2_target: q2.clone(),
            q1,
            q2,
            tau_polyak,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.q1.input_dim()
    }

    fn net(&self, which: Which) -> &MlpParams {
        match which {
            Which::Q1 => &self.q1,
            Which::Q2 => &self.q2,
            Which::Q1Target => &self.q1_target,
            Which::Q2Target => &self.q2_target,
        }
    }

    fn input(&self, s: &Array2<f64>, a: &Array2<f64>) -> Result<Array2<f64>> {
        if s.nrows() != a.nrows() || s.ncols() + a.ncols() != self.input_dim() {
            return Err(TrfpError::Shape(format!(
                "critic expects {} input columns, got states {:?} and actions {:?}",
                self.input_dim(),
                s.dim(),
                a.dim()
            )));
        }
        Ok(concatenate(Axis(1), &[s.view(), a.view()]).expect("row counts checked"))
    }

    pub fn q_value(&self, s: &Array2<f64>, a: &Array2<f64>, which: Which) -> Result<Array1<f64>> {
        let out = self.net(which).forward(&self.input(s, a)?)?;
        Ok(out.column(0).to_owned())
    }

    pub fn min_target_q(&self, s: &Array2<f64>, a: &Array2<f64>) -> Result<Array1<f64>> {
        let q1 = self.q_value(s, a, Which::Q1Target)?;
        let q2 = self.q_value(s, a, Which::Q2Target)?;
        Ok(Zip::from(&q1).and(&q2).map_collect(|a, b| a.min(*b)))
    }

    /// Soft Bellman targets for a batch. Next actions are drawn from
    /// `actor` and clamped like executed actions.
    pub fn bellman_target(
        &self,
        batch: &Batch,
        actor: &dyn StochasticActor,
        alpha: f64,
        gamma: f64,
        rng: &mut dyn RngCore,
    ) -> Result<Array1<f64>> {
        let (a_next, logp_next) = actor.sample_with_logp(&batch.s_next, rng)?;
        let q_next = self.min_target_q(&batch.s_next, &clamp_unit(&a_next))?;
        Ok(soft_target(&batch.r, &batch.done, &q_next, &logp_next, alpha, gamma))
    }

    /// `mean (Q1 - y)^2 + mean (Q2 - y)^2`.
    pub fn critic_loss(&self, s: &Array2<f64>, a: &Array2<f64>, y: &Array1<f64>) -> Result<f64> {
        let mut total = 0.0;
        for which in [Which::Q1, Which::Q2] {
            let q = self.q_value(s, a, which)?;
            total += (&q - y).mapv(|d| d * d).mean().unwrap_or(0.0);
        }
        Ok(total)
    }

    /// One clipped Adam step on both online critics toward fixed targets `y`.
    pub fn update(&mut self, s: &Array2<f64>, a: &Array2<f64>, y: &Array1<f64>, lr: f64, clip: f64) -> Result<CriticStats> {
        let x = self.input(s, a)?;
        let tape = Tape::new();
        let v1 = self.q1.register(&tape);
        let v2 = self.q2.register(&tape);
        let xv = tape.constant(x);
        let yv = tape.constant(y.view().insert_axis(Axis(1)).to_owned());
        let l1 = (self.q1.forward_var(&v1, xv)? - yv).square().mean();
        let l2 = (self.q2.forward_var(&v2, xv)? - yv).square().mean();
        let loss = l1 + l2;
        let value = loss.item();
        if !value.is_finite() {
            return Err(TrfpError::TrainingFault(format!("critic loss is {value}")));
        }
        let g = tape.backward(loss)?;
        let mut grads = v1.grads(&g);
        let n1 = grads.len();
        grads.extend(v2.grads(&g));
        let grad_norm = clip_global_norm(&mut grads, clip);
        self.q1.adam_step(&grads[..n1], lr)?;
        self.q2.adam_step(&grads[n1..], lr)?;
        Ok(CriticStats { loss: value, grad_norm })
    }

    /// `target <- (1 - tau) target + tau online`.
    pub fn soft_update(&mut self) {
        self.q1_target.blend_toward(&self.q1, self.tau_polyak);
        self.q2_target.blend_toward(&self.q2, self.tau_polyak);
    }

    pub fn to_tensors(&self, prefix: &str) -> Vec<NamedTensor> {
        let mut out = Vec::new();
        for (name, net) in [
            ("q1", &self.q1),
            ("q2", &self.q2),
            ("q1_target", &self.q1_target),
            ("q2_target", &self.q2_target),
        ] {
            out.extend(net.to_tensors(&format!("{prefix}.{name}")));
        }
        out.push(NamedTensor::scalar(format!("{prefix}.tau_polyak"), self.tau_polyak));
        out
    }

    pub fn from_tensors(store: &TensorStore, prefix: &str) -> Result<Self> {
        let load = |name: &str| MlpParams::from_tensors(store, &format!("{prefix}.{name}"));
        Ok(Self {
            q1: load("q1")?,
            q2: load("q2")?,
            q1_target: load("q1_target")?,
            q2_target: load("q2_target")?,
            tau_polyak: store.scalar(&format!("{prefix}.tau_polyak"))?,
        })
    }
}
