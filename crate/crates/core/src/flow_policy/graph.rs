//! Recording the sampler on a tape, for the actor and straightening losses.

use std::f64::consts::PI;

use ndarray::{Array1, Array2, Axis};

use super::{FlowPolicy, HybridSchedule};
use crate::diffcore::{Gradients, MlpVars, Tape, Var};
use crate::error::{Result, TrfpError};

/// Policy parameters registered as leaves on one tape.
#[derive(Debug, Clone)]
pub struct PolicyVars<'t> {
    pub velocity: MlpVars<'t>,
    pub sigma: MlpVars<'t>,
}

impl<'t> PolicyVars<'t> {
    /// `(velocity grads, sigma head grads)`.
    pub fn grads(&self, g: &Gradients) -> (Vec<Array2<f64>>, Vec<Array2<f64>>) {
        (self.velocity.grads(g), self.sigma.grads(g))
    }
}

/// A sampler run recorded on a tape.
#[derive(Debug, Clone)]
pub struct GraphChain<'t> {
    /// `u_0 ..= u_K`. With truncation, `u[k_c]` is a fresh leaf.
    pub u: Vec<Var<'t>>,
    pub sigmas: Vec<Var<'t>>,
    /// Sum of the tail log-densities, `[B, 1]`.
    pub tail_logp: Var<'t>,
}

impl<'t> GraphChain<'t> {
    pub fn action(&self) -> Var<'t> {
        self.u[self.u.len() - 1]
    }
}

fn time_col(tape: &Tape, rows: usize, t: f64) -> Var<'_> {
    tape.constant(Array2::from_elem((rows, 1), t))
}

impl FlowPolicy {
    pub fn register<'t>(&self, tape: &'t Tape) -> PolicyVars<'t> {
        PolicyVars {
            velocity: self.velocity.register(tape),
            sigma: self.sigma_head.register(tape),
        }
    }

    /// `v(s, u, t)` on the tape; `t` is a `[B, 1]` column.
    pub fn velocity_var<'t>(&self, vars: &PolicyVars<'t>, s: Var<'t>, u: Var<'t>, t: Var<'t>) -> Result<Var<'t>> {
        let x = s.tape().concat(&[s, u, t]);
        self.velocity.forward_var(&vars.velocity, x)
    }

    pub fn sigma_var<'t>(&self, vars: &PolicyVars<'t>, s: Var<'t>, u: Var<'t>, t: Var<'t>) -> Result<Var<'t>> {
        let tape = s.tape();
        if self.pin_sigma {
            return Ok(tape.constant(Array2::from_elem(u.shape(), self.sigma_min)));
        }
        let pre = self.sigma_head.forward_var(&vars.sigma, tape.concat(&[s, u, t]))?;
        Ok(pre.sigmoid().scale(self.sigma_max - self.sigma_min).offset(self.sigma_min))
    }

    fn heun_var<'t>(&self, vars: &PolicyVars<'t>, s: Var<'t>, u: Var<'t>, t: f64, dt: f64) -> Result<Var<'t>> {
        let tape = s.tape();
        let rows = u.shape().0;
        let v1 = self.velocity_var(vars, s, u, time_col(tape, rows, t))?;
        let predictor = u + v1.scale(dt);
        let v2 = self.velocity_var(vars, s, predictor, time_col(tape, rows, t + dt))?;
        Ok(u + (v1 + v2).scale(0.5 * dt))
    }

    /// Records the hybrid sampler for given `u_0` and tail noise. With
    /// `truncate`, `u_{k_c}` is cut from the prefix so that gradients reach
    /// the parameters only through the tail.
    pub fn graph_chain<'t>(
        &self,
        tape: &'t Tape,
        vars: &PolicyVars<'t>,
        s: &Array2<f64>,
        u0: &Array2<f64>,
        noises: &[Array2<f64>],
        schedule: HybridSchedule,
        truncate: bool,
    ) -> Result<GraphChain<'t>> {
        if noises.len() != schedule.tail {
            return Err(TrfpError::Shape(format!(
                "{} tail noises supplied for L={}",
                noises.len(),
                schedule.tail
            )));
        }
        let rows = u0.nrows();
        let dt = schedule.dt();
        let sv = tape.constant(s.clone());
        let mut u = vec![tape.constant(u0.clone())];
        for k in 0..schedule.cutoff() {
            let next = self.heun_var(vars, sv, u[k], schedule.time(k), dt)?;
            u.push(next);
        }
        if truncate {
            let kc = schedule.cutoff();
            u[kc] = tape.stop_gradient(u[kc]);
        }
        let d = u0.ncols() as f64;
        let mut sigmas = Vec::with_capacity(schedule.tail);
        let mut tail_logp = tape.constant(Array2::zeros((rows, 1)));
        for (j, eps) in noises.iter().enumerate() {
            let k = schedule.cutoff() + j;
            let t = time_col(tape, rows, schedule.time(k));
            let v = self.velocity_var(vars, sv, u[k], t)?;
            let sigma = self.sigma_var(vars, sv, u[k], t)?;
            let e = tape.constant(eps.clone());
            u.push(u[k] + v.scale(dt) + sigma * e);
            let half_sq = 0.5 * eps.map_axis(Axis(1), |r| r.dot(&r));
            let step = -sigma.ln().sum_cols();
            let step = step
                - tape.constant(half_sq.insert_axis(Axis(1)))
                - tape.constant(Array2::from_elem((rows, 1), 0.5 * d * (2.0 * PI).ln()));
            tail_logp = tail_logp + step;
            sigmas.push(sigma);
        }
        Ok(GraphChain { u, sigmas, tail_logp })
    }

    /// Straightening loss on the tape: batch mean of
    /// `||v(s, x_t, t) - (u_tg - u_0)||^2`. Targets and interpolants are
    /// constants.
    pub fn fm_loss_var<'t>(
        &self,
        tape: &'t Tape,
        vars: &PolicyVars<'t>,
        s: &Array2<f64>,
        u0: &Array2<f64>,
        u_tg: &Array2<f64>,
        t: &Array1<f64>,
    ) -> Result<Var<'t>> {
        let tcol = t.view().insert_axis(Axis(1)).to_owned();
        let xt = u_tg * &tcol + &(u0 * &tcol.mapv(|t| 1.0 - t));
        let v = self.velocity_var(vars, tape.constant(s.clone()), tape.constant(xt), tape.constant(tcol))?;
        let diff = v - tape.constant(u_tg - u0);
        Ok(diff.square().sum().scale(1.0 / u0.nrows() as f64))
    }
}

#[cfg(test)]
mod tests {
    use super::super::stubs::random_policy;
    use super::super::{standard_normal, HybridSchedule};
    use super::*;
    use crate::diffcore::MlpParams;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64, k: usize, l: usize) -> (FlowPolicy, Array2<f64>, Array2<f64>, Vec<Array2<f64>>) {
        let sc = HybridSchedule::new(k, l).unwrap();
        let p = random_policy(3, 2, seed, sc);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let s = standard_normal((4, 3), &mut rng);
        let u0 = standard_normal((4, 2), &mut rng);
        let noises = (0..l).map(|_| standard_normal((4, 2), &mut rng)).collect();
        (p, s, u0, noises)
    }

    #[test]
    fn graph_values_match_plain_sampler() {
        let (p, s, u0, noises) = setup(1, 4, 2);
        let sc = p.schedule;
        let chain = p.sample_hybrid_with_noise(&s, u0.clone(), noises.clone(), sc).unwrap();
        for truncate in [false, true] {
            let tape = Tape::new();
            let vars = p.register(&tape);
            let g = p.graph_chain(&tape, &vars, &s, &u0, &noises, sc, truncate).unwrap();
            for (a, b) in g.u.iter().zip(&chain.u) {
                assert!((&*a.value() - b).iter().all(|d| d.abs() < 1e-12));
            }
            let tl = chain.tail_logp();
            for i in 0..4 {
                assert!((g.tail_logp.value()[[i, 0]] - tl[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fm_loss_var_matches_plain() {
        let (p, s, u0, _) = setup(2, 4, 1);
        let tg = p.deterministic_rollout(&s, &u0, p.schedule).unwrap();
        let t = Array1::from(vec![0.1, 0.3, 0.5, 0.7]);
        let tape = Tape::new();
        let vars = p.register(&tape);
        let loss = p.fm_loss_var(&tape, &vars, &s, &u0, &tg, &t).unwrap().item();
        let plain = p.straightening_loss(&s, &u0, &tg, &t).unwrap();
        assert!((loss - plain).abs() < 1e-12);
    }

    /// Objective used for the finite-difference checks: mean tail log-density
    /// plus a fixed linear functional of the action.
    fn objective_plain(p: &FlowPolicy, s: &Array2<f64>, start: &Array2<f64>, kc: usize, noises: &[Array2<f64>]) -> f64 {
        // Runs only the tail from a given u_{k_c}.
        let sc = p.schedule;
        let mut u = start.clone();
        let mut lp = Array1::<f64>::zeros(u.nrows());
        for (j, eps) in noises.iter().enumerate() {
            let step = p.sde_tail_step(s, &u, sc.time(kc + j), sc.dt(), eps).unwrap();
            lp += &step.logp;
            u = step.next;
        }
        lp.mean().unwrap() + u.sum() * 0.7
    }

    fn objective_var<'t>(g: &GraphChain<'t>) -> Var<'t> {
        g.tail_logp.mean() + g.action().sum().scale(0.7)
    }

    fn perturbed(p: &FlowPolicy, which: usize, idx: usize, flat: usize, h: f64) -> FlowPolicy {
        let mut q = p.clone();
        let net: &mut MlpParams = if which == 0 { &mut q.velocity } else { &mut q.sigma_head };
        let param = &mut net.params_mut()[idx];
        let cols = param.ncols();
        param[[flat / cols, flat % cols]] += h;
        q
    }

    #[test]
    fn truncated_gradients_match_tail_only_finite_differences() {
        let (p, s, u0, noises) = setup(3, 4, 2);
        let sc = p.schedule;
        let tape = Tape::new();
        let vars = p.register(&tape);
        let g = p.graph_chain(&tape, &vars, &s, &u0, &noises, sc, true).unwrap();
        let grads = tape.backward(objective_var(&g)).unwrap();
        let (gv, gs) = vars.grads(&grads);
        let start = p.deterministic_trajectory(&s, &u0, sc).unwrap()[sc.cutoff()].clone();
        let h = 1e-5;
        for (which, gl) in [(0, &gv), (1, &gs)] {
            for (idx, gmat) in gl.iter().enumerate() {
                for flat in (0..gmat.len()).step_by(7) {
                    let up = objective_plain(&perturbed(&p, which, idx, flat, h), &s, &start, sc.cutoff(), &noises);
                    let dn = objective_plain(&perturbed(&p, which, idx, flat, -h), &s, &start, sc.cutoff(), &noises);
                    let fd = (up - dn) / (2.0 * h);
                    let an = gmat.as_slice().unwrap()[flat];
                    assert!((fd - an).abs() <= 1e-6 + 1e-4 * fd.abs(), "net {which} param {idx}[{flat}]: {an} vs {fd}");
                }
            }
        }
    }

    #[test]
    fn untruncated_gradients_include_prefix_path() {
        let (p, s, u0, noises) = setup(4, 4, 1);
        let sc = p.schedule;
        let grads_of = |truncate| {
            let tape = Tape::new();
            let vars = p.register(&tape);
            let g = p.graph_chain(&tape, &vars, &s, &u0, &noises, sc, truncate).unwrap();
            let grads = tape.backward(objective_var(&g)).unwrap();
            vars.grads(&grads).0
        };
        let full = grads_of(false);
        let cut = grads_of(true);
        let diff: f64 = full.iter().zip(&cut).map(|(a, b)| (a - b).mapv(f64::abs).sum()).sum();
        assert!(diff > 1e-6);
        // Full-chain gradient checked against a whole-sampler finite difference.
        let obj = |q: &FlowPolicy| {
            let c = q.sample_hybrid_with_noise(&s, u0.clone(), noises.clone(), sc).unwrap();
            c.tail_logp().mean().unwrap() + c.action().sum() * 0.7
        };
        let h = 1e-5;
        let fd = (obj(&perturbed(&p, 0, 0, 5, h)) - obj(&perturbed(&p, 0, 0, 5, -h))) / (2.0 * h);
        let an = full[0].as_slice().unwrap()[5];
        assert!((fd - an).abs() <= 1e-6 + 1e-4 * fd.abs(), "{an} vs {fd}");
    }

    #[test]
    fn detached_cutoff_equals_fresh_constant() {
        let (p, s, u0, noises) = setup(5, 5, 2);
        let sc = p.schedule;
        let tape = Tape::new();
        let vars = p.register(&tape);
        let g = p.graph_chain(&tape, &vars, &s, &u0, &noises, sc, true).unwrap();
        let a = vars.grads(&tape.backward(objective_var(&g)).unwrap());

        // Rebuild the tail by hand from a fresh constant holding u_{k_c}.
        let tape2 = Tape::new();
        let vars2 = p.register(&tape2);
        let kc = sc.cutoff();
        let start = g.u[kc].value().clone();
        let sv = tape2.constant(s.clone());
        let mut u = tape2.constant(start);
        let mut lp = tape2.constant(Array2::zeros((4, 1)));
        for (j, eps) in noises.iter().enumerate() {
            let t = tape2.constant(Array2::from_elem((4, 1), sc.time(kc + j)));
            let v = p.velocity_var(&vars2, sv, u, t).unwrap();
            let sig = p.sigma_var(&vars2, sv, u, t).unwrap();
            u = u + v.scale(sc.dt()) + sig * tape2.constant(eps.clone());
            let half_sq = 0.5 * eps.map_axis(Axis(1), |r| r.dot(&r));
            lp = lp + (-sig.ln().sum_cols()
                - tape2.constant(half_sq.insert_axis(Axis(1)))
                - tape2.constant(Array2::from_elem((4, 1), (2.0 * PI).ln())));
        }
        let root = lp.mean() + u.sum().scale(0.7);
        let b = vars2.grads(&tape2.backward(root).unwrap());
        assert_eq!(a, b);
    }
}
