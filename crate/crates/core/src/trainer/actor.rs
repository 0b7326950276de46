//! Actor objectives for the flow policy: the truncated RL loss, the
//! straightening term, and one optimizer step on their sum.

use ndarray::{Array1, Array2};
use rand::{Rng, RngCore};

use crate::critic::QFunction;
use crate::diffcore::{clip_global_norm, Tape, Var};
use crate::error::{Result, TrfpError};
use crate::flow_policy::{standard_normal, standard_normal_logpdf, FlowPolicy, GraphChain, PolicyVars};

/// Random inputs of one actor update.
#[derive(Debug, Clone)]
pub struct ActorDraw {
    pub u0: Array2<f64>,
    pub noises: Vec<Array2<f64>>,
    /// Straightening times, one per row, uniform on `[0, tau_cut]`.
    pub t_fm: Array1<f64>,
}

impl ActorDraw {
    pub fn sample(policy: &FlowPolicy, rows: usize, rng: &mut dyn RngCore) -> Self {
        let shape = (rows, policy.action_dim());
        let u0 = standard_normal(shape, rng);
        let noises = (0..policy.schedule.tail).map(|_| standard_normal(shape, rng)).collect();
        let tau = policy.schedule.tau_cut();
        let t_fm = Array1::from_shape_simple_fn(rows, || tau * rng.random::<f64>());
        Self { u0, noises, t_fm }
    }
}

/// The recorded actor objective and the by-products needed for logging and
/// the temperature update.
pub struct ActorObjective<'t> {
    pub total: Var<'t>,
    pub truncated: Var<'t>,
    pub fm: Option<Var<'t>>,
    pub chain: GraphChain<'t>,
    /// Prior plus tail log-densities per row, as plain data.
    pub surrogate_logp: Array1<f64>,
}

/// Weight of the quadratic penalty on the part of `u_K` outside `[-1, 1]`.
pub const BOUND_PENALTY: f64 = 1.0;

/// `mean[alpha * sum tail_logp - min_j Q_j(s, clamp(u_K)) + c |u_K - clamp(u_K)|^2]`,
/// with `u_{k_c}` cut from the prefix when `truncate` is set. The critic only
/// ever sees executed (clamped) actions, so it is queried the same way here;
/// the penalty supplies the pull back that the flat clamped region lacks.
pub fn truncated_loss<'t>(
    policy: &FlowPolicy,
    tape: &'t Tape,
    vars: &PolicyVars<'t>,
    q: &dyn QFunction,
    alpha: f64,
    s: &Array2<f64>,
    draw: &ActorDraw,
    truncate: bool,
) -> Result<(Var<'t>, GraphChain<'t>)> {
    let chain = policy.graph_chain(tape, vars, s, &draw.u0, &draw.noises, policy.schedule, truncate)?;
    let u = chain.action();
    let clamped = u.clamp(-1.0, 1.0);
    let qv = q.min_q_var(tape.constant(s.clone()), clamped)?;
    let excess = (u - clamped).square().sum_cols().scale(BOUND_PENALTY);
    let loss = (chain.tail_logp.scale(alpha) - qv + excess).mean();
    Ok((loss, chain))
}

/// `L_trunc + lambda_fm * L_fm`. The straightening target is the noise-free
/// rollout of the current parameters from the same `u_0`.
pub fn actor_objective<'t>(
    policy: &FlowPolicy,
    tape: &'t Tape,
    vars: &PolicyVars<'t>,
    q: &dyn QFunction,
    alpha: f64,
    lambda_fm: f64,
    s: &Array2<f64>,
    draw: &ActorDraw,
) -> Result<ActorObjective<'t>> {
    let (truncated, chain) = truncated_loss(policy, tape, vars, q, alpha, s, draw, true)?;
    let (total, fm) = if lambda_fm > 0.0 {
        let target = policy.deterministic_rollout(s, &draw.u0, policy.schedule)?;
        let fm = policy.fm_loss_var(tape, vars, s, &draw.u0, &target, &draw.t_fm)?;
        (truncated + fm.scale(lambda_fm), Some(fm))
    } else {
        (truncated, None)
    };
    let tail = chain.tail_logp.value().column(0).to_owned();
    let surrogate_logp = standard_normal_logpdf(&draw.u0) + tail;
    Ok(ActorObjective {
        total,
        truncated,
        fm,
        chain,
        surrogate_logp,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActorStats {
    pub loss: f64,
    pub truncated_loss: f64,
    pub fm_loss: Option<f64>,
    pub surrogate_logp: Array1<f64>,
    pub mean_sigma: f64,
    pub grad_norm: f64,
}

/// Records the objective, backpropagates, clips the joint gradient of both
/// heads, and applies Adam.
pub fn actor_update(
    policy: &mut FlowPolicy,
    q: &dyn QFunction,
    alpha: f64,
    lambda_fm: f64,
    s: &Array2<f64>,
    draw: &ActorDraw,
    lr: f64,
    clip: f64,
) -> Result<ActorStats> {
    let tape = Tape::new();
    let vars = policy.register(&tape);
    let obj = actor_objective(policy, &tape, &vars, q, alpha, lambda_fm, s, draw)?;
    let loss = obj.total.item();
    if !loss.is_finite() {
        return Err(TrfpError::TrainingFault(format!("actor loss is {loss}")));
    }
    let mean_sigma = if obj.chain.sigmas.is_empty() {
        0.0
    } else {
        obj.chain.sigmas.iter().map(|s| s.value().mean().unwrap_or(0.0)).sum::<f64>() / obj.chain.sigmas.len() as f64
    };
    let stats = ActorStats {
        loss,
        truncated_loss: obj.truncated.item(),
        fm_loss: obj.fm.map(|v| v.item()),
        surrogate_logp: obj.surrogate_logp.clone(),
        mean_sigma,
        grad_norm: 0.0,
    };
    let g = tape.backward(obj.total)?;
    let (gv, gs) = vars.grads(&g);
    let nv = gv.len();
    let mut grads = gv;
    grads.extend(gs);
    let grad_norm = clip_global_norm(&mut grads, clip);
    policy.velocity.adam_step(&grads[..nv], lr)?;
    if !policy.pin_sigma {
        policy.sigma_head.adam_step(&grads[nv..], lr)?;
    }
    Ok(ActorStats { grad_norm, ..stats })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow_policy::{FlowPolicyConfig, HybridSchedule};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// `Q(s, a) = c . a + b`, identical twins.
    struct LinearQ {
        c: Vec<f64>,
        b: f64,
    }

    impl QFunction for LinearQ {
        fn min_q(&self, _s: &Array2<f64>, a: &Array2<f64>) -> Result<Array1<f64>> {
            Ok(a.dot(&Array1::from(self.c.clone())) + self.b)
        }

        fn min_q_var<'t>(&self, s: Var<'t>, a: Var<'t>) -> Result<Var<'t>> {
            let tape = s.tape();
            let w = tape.constant(Array1::from(self.c.clone()).insert_axis(ndarray::Axis(1)));
            Ok(a.matmul(w).offset(self.b))
        }
    }

    fn policy(seed: u64) -> FlowPolicy {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FlowPolicy::new(
            &FlowPolicyConfig {
                state_dim: 2,
                action_dim: 2,
                hidden: vec![16, 16],
                sigma_hidden: vec![8],
                sigma_min: 1e-3,
                sigma_max: 0.5,
                sigma_init: 0.1,
                schedule: HybridSchedule::new(4, 1).unwrap(),
            },
            &mut rng,
        )
        .unwrap()
    }

    fn states(rows: usize, seed: u64) -> Array2<f64> {
        standard_normal((rows, 2), &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn constant_q_without_entropy_gives_no_gradient() {
        let p = policy(0);
        let s = states(8, 1);
        let mut draw = ActorDraw::sample(&p, 8, &mut ChaCha8Rng::seed_from_u64(2));
        // keep every action inside the box so the bound penalty is idle
        draw.u0.mapv_inplace(|x| 0.1 * x);
        let q = LinearQ { c: vec![0.0, 0.0], b: 3.0 };
        let tape = Tape::new();
        let vars = p.register(&tape);
        let obj = actor_objective(&p, &tape, &vars, &q, 0.0, 0.0, &s, &draw).unwrap();
        assert_eq!(obj.total.item(), -3.0);
        let g = tape.backward(obj.total).unwrap();
        let (gv, gs) = vars.grads(&g);
        assert!(gv.iter().chain(&gs).all(|m| m.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn zero_weight_equals_truncated_loss() {
        let p = policy(1);
        let s = states(8, 3);
        let draw = ActorDraw::sample(&p, 8, &mut ChaCha8Rng::seed_from_u64(4));
        let q = LinearQ { c: vec![1.0, -0.5], b: 0.0 };
        let tape = Tape::new();
        let vars = p.register(&tape);
        let obj = actor_objective(&p, &tape, &vars, &q, 0.2, 0.0, &s, &draw).unwrap();
        assert_eq!(obj.total.item(), obj.truncated.item());
        assert!(obj.fm.is_none());

        let tape = Tape::new();
        let vars = p.register(&tape);
        let obj = actor_objective(&p, &tape, &vars, &q, 0.2, 0.1, &s, &draw).unwrap();
        let expected = obj.truncated.item() + 0.1 * obj.fm.unwrap().item();
        assert!((obj.total.item() - expected).abs() < 1e-12);
    }

    #[test]
    fn linear_q_gradient_matches_gaussian_expectation() {
        // One tail step from a detached u_{k_c}, sigma frozen: with Q(a) = c.a
        // and a = u + v dt + sigma eps, d/dv E[alpha logp - Q] = -c dt per row,
        // because the tail log-density does not depend on v. The batch mean
        // divides by B, so the adjoint of the velocity output bias is -c dt.
        let mut p = policy(5);
        p.pin_sigma = true;
        let s = states(16, 6);
        let mut draw = ActorDraw::sample(&p, 16, &mut ChaCha8Rng::seed_from_u64(7));
        draw.u0.mapv_inplace(|x| 0.1 * x);
        let c = vec![0.8, -1.3];
        let q = LinearQ { c: c.clone(), b: 0.0 };
        let tape = Tape::new();
        let vars = p.register(&tape);
        let (loss, _) = truncated_loss(&p, &tape, &vars, &q, 0.2, &s, &draw, true).unwrap();
        let g = tape.backward(loss).unwrap();
        let (gv, gs) = vars.grads(&g);
        let last_bias = &gv[gv.len() - 1];
        let dt = p.schedule.dt();
        for j in 0..2 {
            assert!((last_bias[[0, j]] + c[j] * dt).abs() < 1e-5, "{last_bias}");
        }
        assert!(gs.iter().all(|m| m.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn actions_outside_the_box_are_pulled_back() {
        let mut p = policy(11);
        p.pin_sigma = true;
        let s = states(6, 12);
        let mut draw = ActorDraw::sample(&p, 6, &mut ChaCha8Rng::seed_from_u64(13));
        draw.u0.fill(3.0);
        let q = LinearQ { c: vec![0.0, 0.0], b: 0.0 };
        let tape = Tape::new();
        let vars = p.register(&tape);
        let (loss, chain) = truncated_loss(&p, &tape, &vars, &q, 0.0, &s, &draw, true).unwrap();
        let u = chain.action().value().clone();
        let want = u.mapv(|x| (x - 1.0).powi(2)).sum() / 6.0 * BOUND_PENALTY;
        assert!((loss.item() - want).abs() < 1e-12);
        let g = tape.backward(loss).unwrap();
        let (gv, _) = vars.grads(&g);
        // gradient descent on the output bias lowers the actions
        assert!(gv[gv.len() - 1].iter().all(|&x| x > 0.0));
    }

    #[test]
    fn without_rl_term_only_straightening_moves_velocity() {
        let p = policy(8);
        let s = states(8, 9);
        let draw = ActorDraw::sample(&p, 8, &mut ChaCha8Rng::seed_from_u64(10));
        let tape = Tape::new();
        let vars = p.register(&tape);
        let target = p.deterministic_rollout(&s, &draw.u0, p.schedule).unwrap();
        let fm = p.fm_loss_var(&tape, &vars, &s, &draw.u0, &target, &draw.t_fm).unwrap();
        let g = tape.backward(fm).unwrap();
        let (gv, gs) = vars.grads(&g);
        assert!(gs.iter().all(|m| m.iter().all(|&x| x == 0.0)));
        // finite difference on one velocity weight with the target held fixed
        let h = 1e-5;
        let mut up = p.clone();
        up.velocity.params_mut()[2][[3, 4]] += h;
        let mut dn = p.clone();
        dn.velocity.params_mut()[2][[3, 4]] -= h;
        let fd = (up.straightening_loss(&s, &draw.u0, &target, &draw.t_fm).unwrap()
            - dn.straightening_loss(&s, &draw.u0, &target, &draw.t_fm).unwrap())
            / (2.0 * h);
        assert!((fd - gv[2][[3, 4]]).abs() < 1e-6 + 1e-4 * fd.abs());
    }

    #[test]
    fn update_moves_actions_up_a_linear_q() {
        let mut p = policy(11);
        let s = states(32, 12);
        let q = LinearQ { c: vec![1.0, 0.0], b: 0.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let before = p.sample_eval(&s, &Array2::zeros((32, 2)), 4).unwrap().column(0).mean().unwrap();
        for _ in 0..30 {
            let draw = ActorDraw::sample(&p, 32, &mut rng);
            actor_update(&mut p, &q, 0.1, 0.1, &s, &draw, 1e-2, 10.0).unwrap();
        }
        let after = p.sample_eval(&s, &Array2::zeros((32, 2)), 4).unwrap().column(0).mean().unwrap();
        assert!(after > before + 0.1, "{before} -> {after}");
    }
}
