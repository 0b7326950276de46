//! Frozen-critic check on the one-state bandit: with `Q` fixed to
//! `T log m(a)` and `alpha = T`, the optimal maximum-entropy policy is the
//! mixture `m` itself.

use ndarray::{Array1, Array2, Axis};
use rand::RngCore;

use super::actor::{actor_update, ActorDraw};
use crate::critic::QFunction;
use crate::diffcore::Var;
use crate::envs::SingleStateBandit;
use crate::error::Result;
use crate::flow_policy::FlowPolicy;

/// `Q(s, a) = reward(a)` of a [`SingleStateBandit`], ignoring `s`.
#[derive(Debug, Clone)]
pub struct FixedBimodalQ {
    pub bandit: SingleStateBandit,
}

impl FixedBimodalQ {
    pub fn new(bandit: SingleStateBandit) -> Self {
        Self { bandit }
    }

    fn log_norm(&self) -> f64 {
        let var = self.bandit.width * self.bandit.width;
        -(2.0 * std::f64::consts::PI * var).ln() - (self.bandit.modes.len() as f64).ln()
    }

    /// Per-mode exponents `-||a - m||^2 / (2 w^2)` as plain data.
    fn exponents(&self, a: &Array2<f64>) -> Array2<f64> {
        let var = self.bandit.width * self.bandit.width;
        let mut e = Array2::zeros((a.nrows(), self.bandit.modes.len()));
        for (i, row) in a.rows().into_iter().enumerate() {
            for (k, m) in self.bandit.modes.iter().enumerate() {
                e[[i, k]] = -((row[0] - m[0]).powi(2) + (row[1] - m[1]).powi(2)) / (2.0 * var);
            }
        }
        e
    }
}

impl QFunction for FixedBimodalQ {
    fn min_q(&self, _s: &Array2<f64>, a: &Array2<f64>) -> Result<Array1<f64>> {
        Ok(a.rows().into_iter().map(|r| self.bandit.reward([r[0], r[1]])).collect())
    }

    fn min_q_var<'t>(&self, s: Var<'t>, a: Var<'t>) -> Result<Var<'t>> {
        let tape = s.tape();
        let rows = a.shape().0;
        let var = self.bandit.width * self.bandit.width;
        // log-sum-exp shifted by the (constant) largest exponent per row
        let top = self
            .exponents(&a.value())
            .map_axis(Axis(1), |r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max));
        let top_col = top.insert_axis(Axis(1));
        let mut sum: Option<Var<'t>> = None;
        for m in &self.bandit.modes {
            let centre = tape.constant(Array2::from_shape_fn((rows, 2), |(_, j)| m[j]));
            let e = (a - centre).square().sum_cols().scale(-1.0 / (2.0 * var)) - tape.constant(top_col.clone());
            let e = e.exp();
            sum = Some(match sum {
                Some(acc) => acc + e,
                None => e,
            });
        }
        let lse = sum.expect("at least one mode").ln() + tape.constant(top_col);
        Ok(lse.offset(self.log_norm()).scale(self.bandit.temperature))
    }
}

/// Probability mass of the Boltzmann distribution `exp(Q / alpha)` on an
/// `bins x bins` grid over `[-1, 1]^2`, with each cell integrated by a
/// `sub x sub` midpoint rule and the whole normalised over the square.
pub fn boltzmann_grid(q: &FixedBimodalQ, alpha: f64, bins: usize, sub: usize) -> Array2<f64> {
    let n = bins * sub;
    let h = 2.0 / n as f64;
    let mut logits = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            let a = [-1.0 + (i as f64 + 0.5) * h, -1.0 + (j as f64 + 0.5) * h];
            logits[[i, j]] = q.bandit.reward(a) / alpha;
        }
    }
    let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut mass = Array2::<f64>::zeros((bins, bins));
    for ((i, j), l) in logits.indexed_iter() {
        mass[[i / sub, j / sub]] += (l - top).exp();
    }
    let total = mass.sum();
    mass / total
}

/// Histogram of actions clamped into `[-1, 1]^2`, as probabilities.
pub fn action_histogram(actions: &Array2<f64>, bins: usize) -> Array2<f64> {
    let mut hist = Array2::zeros((bins, bins));
    let cell = |x: f64| (((x.clamp(-1.0, 1.0) + 1.0) / 2.0 * bins as f64) as usize).min(bins - 1);
    for row in actions.rows() {
        hist[[cell(row[0]), cell(row[1])]] += 1.0;
    }
    let n = actions.nrows().max(1) as f64;
    hist / n
}

/// `KL(p || q) = sum p ln(p / q)` over cells with `p > 0`.
pub fn binned_kl(p: &Array2<f64>, q: &Array2<f64>) -> f64 {
    p.iter()
        .zip(q.iter())
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi / qi.max(f64::MIN_POSITIVE)).ln())
        .sum()
}

/// Actor-only training against the frozen bandit critic at fixed `alpha`.
/// Returns the mean surrogate log-likelihood of the last update.
pub fn train_against_fixed_q(
    policy: &mut FlowPolicy,
    q: &FixedBimodalQ,
    alpha: f64,
    lambda_fm: f64,
    updates: usize,
    batch: usize,
    lr: f64,
    clip: f64,
    rng: &mut dyn RngCore,
) -> Result<f64> {
    let s = Array2::from_elem((batch, 1), 1.0);
    let mut last = 0.0;
    for _ in 0..updates {
        let draw = ActorDraw::sample(policy, batch, rng);
        let stats = actor_update(policy, q, alpha, lambda_fm, &s, &draw, lr, clip)?;
        last = stats.surrogate_logp.mean().unwrap_or(0.0);
    }
    Ok(last)
}

/// Draws `n` hybrid-sampler actions at the bandit's single state.
pub fn policy_samples(policy: &FlowPolicy, n: usize, rng: &mut dyn RngCore) -> Result<Array2<f64>> {
    let s = Array2::from_elem((n, 1), 1.0);
    Ok(policy.sample_hybrid(&s, rng, policy.schedule)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tape;
    use ndarray::array;

    #[test]
    fn graph_q_matches_reward_and_its_gradient() {
        let q = FixedBimodalQ::new(SingleStateBandit::default());
        let a = array![[0.3, 0.1], [-0.6, -0.2], [4.0, 3.0]];
        let tape = Tape::new();
        let av = tape.leaf(a.clone());
        let qv = q.min_q_var(tape.constant(Array2::ones((3, 1))), av).unwrap();
        let plain = q.min_q(&Array2::ones((3, 1)), &a).unwrap();
        for i in 0..3 {
            assert!((qv.value()[[i, 0]] - plain[i]).abs() < 1e-10);
        }
        let g = tape.backward(qv.sum()).unwrap().wrt(av);
        let h = 1e-6;
        for i in 0..3 {
            for j in 0..2 {
                let mut up = a.clone();
                up[[i, j]] += h;
                let mut dn = a.clone();
                dn[[i, j]] -= h;
                let fd = (q.min_q(&Array2::ones((3, 1)), &up).unwrap()[i] - q.min_q(&Array2::ones((3, 1)), &dn).unwrap()[i]) / (2.0 * h);
                assert!((fd - g[[i, j]]).abs() < 1e-5 * (1.0 + fd.abs()), "{fd} vs {}", g[[i, j]]);
            }
        }
    }

    #[test]
    fn boltzmann_grid_is_normalised_and_symmetric() {
        let q = FixedBimodalQ::new(SingleStateBandit::default());
        let g = boltzmann_grid(&q, 0.2, 20, 4);
        assert!((g.sum() - 1.0).abs() < 1e-12);
        for i in 0..20 {
            for j in 0..20 {
                assert!((g[[i, j]] - g[[19 - i, j]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mixture_samples_have_small_kl() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, Normal};
        let q = FixedBimodalQ::new(SingleStateBandit::default());
        let grid = boltzmann_grid(&q, 0.2, 20, 4);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let n01 = Normal::new(0.0, 0.15).unwrap();
        let n = 100_000;
        let mut a = Array2::zeros((n, 2));
        for i in 0..n {
            let cx = if i % 2 == 0 { -0.5 } else { 0.5 };
            a[[i, 0]] = cx + n01.sample(&mut rng);
            a[[i, 1]] = n01.sample(&mut rng);
        }
        let kl = binned_kl(&action_histogram(&a, 20), &grid);
        assert!(kl < 0.01, "{kl}");
        // a single mode is far off
        a.column_mut(0).mapv_inplace(|x| x.abs());
        assert!(binned_kl(&action_histogram(&a, 20), &grid) > 0.5);
    }
}
