//! Tanh-squashed diagonal Gaussian policy, the standard soft actor-critic
//! baseline.

use std::f64::consts::PI;

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, RngCore};

use crate::critic::{QFunction, StochasticActor};
use crate::diffcore::{clip_global_norm, Activation, MlpParams, MlpVars, NamedTensor, OutputInit, TensorStore, Tape, Var};
use crate::error::{Result, TrfpError};
use crate::flow_policy::standard_normal;

const LOG_STD_MIN: f64 = -5.0;
const LOG_STD_MAX: f64 = 2.0;
/// Keeps `ln(1 - tanh^2)` finite at saturation.
const SQUASH_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPolicy {
    pub net: MlpParams,
    action_dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub loss: f64,
    pub logp: Array1<f64>,
    pub mean_std: f64,
    pub grad_norm: f64,
}

fn squash_log_std(raw: f64) -> f64 {
    LOG_STD_MIN + 0.5 * (LOG_STD_MAX - LOG_STD_MIN) * (raw.tanh() + 1.0)
}

impl GaussianPolicy {
    pub fn new(state_dim: usize, action_dim: usize, hidden: &[usize], rng: &mut impl Rng) -> Self {
        let mut sizes = vec![state_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(2 * action_dim);
        Self {
            net: MlpParams::new(&sizes, Activation::Mish, OutputInit::Small { scale: 0.01, bias: 0.0 }, rng),
            action_dim,
        }
    }

    pub fn from_net(net: MlpParams) -> Result<Self> {
        if net.output_dim() % 2 != 0 {
            return Err(TrfpError::Shape("Gaussian head needs an even output width".into()));
        }
        let action_dim = net.output_dim() / 2;
        Ok(Self { net, action_dim })
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn state_dim(&self) -> usize {
        self.net.input_dim()
    }

    fn heads(&self, s: &Array2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        let out = self.net.forward(s)?;
        let d = self.action_dim;
        let mean = out.slice(ndarray::s![.., ..d]).to_owned();
        let log_std = out.slice(ndarray::s![.., d..]).mapv(squash_log_std);
        Ok((mean, log_std))
    }

    /// `tanh(mean)`, the usual deterministic evaluation action.
    pub fn mean_action(&self, s: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(self.heads(s)?.0.mapv(f64::tanh))
    }

    /// Action and log-density for given standard-normal noise.
    pub fn sample_with_noise(&self, s: &Array2<f64>, eps: &Array2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
        let (mean, log_std) = self.heads(s)?;
        let pre = &mean + &(log_std.mapv(f64::exp) * eps);
        let a = pre.mapv(f64::tanh);
        let d = self.action_dim as f64;
        let mut logp = Array1::from_elem(s.nrows(), -0.5 * d * (2.0 * PI).ln());
        for i in 0..s.nrows() {
            for j in 0..self.action_dim {
                logp[i] -= log_std[[i, j]] + 0.5 * eps[[i, j]] * eps[[i, j]] + (1.0 - a[[i, j]] * a[[i, j]] + SQUASH_EPS).ln();
            }
        }
        Ok((a, logp))
    }

    fn graph<'t>(&self, tape: &'t Tape, vars: &MlpVars<'t>, s: &Array2<f64>, eps: &Array2<f64>) -> Result<(Var<'t>, Var<'t>, Var<'t>)> {
        let out = self.net.forward_var(vars, tape.constant(s.clone()))?;
        let d = self.action_dim;
        let mean = out.slice_cols(0, d);
        let log_std = out
            .slice_cols(d, 2 * d)
            .tanh()
            .offset(1.0)
            .scale(0.5 * (LOG_STD_MAX - LOG_STD_MIN))
            .offset(LOG_STD_MIN);
        let pre = mean + log_std.exp() * tape.constant(eps.clone());
        let a = pre.tanh();
        let half_sq = 0.5 * eps.map_axis(Axis(1), |r| r.dot(&r));
        let constant = half_sq.mapv(|x| x + 0.5 * d as f64 * (2.0 * PI).ln()).insert_axis(Axis(1));
        let jac = a.square().scale(-1.0).offset(1.0 + SQUASH_EPS).ln().sum_cols();
        let logp = -log_std.sum_cols() - tape.constant(constant) - jac;
        Ok((a, logp, log_std))
    }

    /// One clipped Adam step on `mean[alpha logp - min Q(s, a)]`.
    pub fn update(
        &mut self,
        q: &dyn QFunction,
        alpha: f64,
        s: &Array2<f64>,
        eps: &Array2<f64>,
        lr: f64,
        clip: f64,
    ) -> Result<GaussianStats> {
        let tape = Tape::new();
        let vars = self.net.register(&tape);
        let (a, logp, log_std) = self.graph(&tape, &vars, s, eps)?;
        let qv = q.min_q_var(tape.constant(s.clone()), a)?;
        let loss = (logp.scale(alpha) - qv).mean();
        let value = loss.item();
        if !value.is_finite() {
            return Err(TrfpError::TrainingFault(format!("actor loss is {value}")));
        }
        let logp_plain = logp.value().column(0).to_owned();
        let mean_std = log_std.value().mapv(f64::exp).mean().unwrap_or(0.0);
        let g = tape.backward(loss)?;
        let mut grads = vars.grads(&g);
        let grad_norm = clip_global_norm(&mut grads, clip);
        self.net.adam_step(&grads, lr)?;
        Ok(GaussianStats {
            loss: value,
            logp: logp_plain,
            mean_std,
            grad_norm,
        })
    }

    pub fn to_tensors(&self, prefix: &str) -> Vec<NamedTensor> {
        self.net.to_tensors(&format!("{prefix}.net"))
    }

    pub fn from_tensors(store: &TensorStore, prefix: &str) -> Result<Self> {
        Self::from_net(MlpParams::from_tensors(store, &format!("{prefix}.net"))?)
    }
}

impl StochasticActor for GaussianPolicy {
    fn sample_with_logp(&self, s: &Array2<f64>, rng: &mut dyn RngCore) -> Result<(Array2<f64>, Array1<f64>)> {
        let eps = standard_normal((s.nrows(), self.action_dim), rng);
        self.sample_with_noise(s, &eps)
    }
}
