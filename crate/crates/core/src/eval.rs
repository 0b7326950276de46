//! Evaluation protocols: deterministic few-step sampling with Q-guided
//! candidate selection, multigoal mode coverage, and flow diagnostics.

use ndarray::{Array1, Array2};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::critic::QFunction;
use crate::envs::{Env, EnvKind};
use crate::error::{Result, TrfpError};
use crate::flow_policy::{path_deviation, prefix_logdensity_error, standard_normal, straightness, FlowPolicy};
use crate::trainer::Actor;

/// Environment variable capping evaluation threads.
pub const THREADS_VAR: &str = "TRFP_THREADS";

/// Index of the largest score; ties go to the lowest index.
pub fn argmax_first(scores: &Array1<f64>) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Draws `n` priors, maps each through the deterministic sampler, and
/// returns the candidate with the highest `min(Q1, Q2)` together with its
/// index.
pub fn q_guided_select(
    actor: &Actor,
    q: &dyn QFunction,
    obs: &[f64],
    n: usize,
    steps: usize,
    rng: &mut dyn RngCore,
) -> Result<(Vec<f64>, usize)> {
    if n == 0 {
        return Err(TrfpError::Usage("need at least one candidate".into()));
    }
    let s = Array2::from_shape_fn((n, obs.len()), |(_, j)| obs[j]);
    let u0 = standard_normal((n, actor.action_dim()), rng);
    let candidates = actor.eval_action(&s, &u0, steps)?;
    if n == 1 {
        return Ok((candidates.row(0).to_vec(), 0));
    }
    let scores = q.min_q(&s, &candidates)?;
    let best = argmax_first(&scores);
    Ok((candidates.row(best).to_vec(), best))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub episodes: usize,
    pub steps: usize,
    pub candidates: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(xs: &[f64]) -> Self {
        if xs.is_empty() {
            return Self { mean: 0.0, std: 0.0, max: 0.0 };
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Self { mean, std, max }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub env: EnvKind,
    pub episodes: usize,
    pub steps_used: usize,
    pub candidates: usize,
    pub mean_return: f64,
    pub std_return: f64,
    pub returns: Vec<f64>,
    pub lengths: Vec<usize>,
    /// Goal reached by each episode, if any (multigoal only).
    pub goals: Vec<Option<usize>>,
    /// Per-goal counts; empty for environments without goals.
    pub mode_visit_counts: Vec<usize>,
    pub diagnostics: Option<DiagnosticsReport>,
}

/// One step of an evaluated episode, for CSV export.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub obs: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

struct Episode {
    ret: f64,
    len: usize,
    goal: Option<usize>,
    trace: Vec<TraceRow>,
}

fn run_episode(
    actor: &Actor,
    q: &dyn QFunction,
    env: &mut dyn Env,
    opts: &EvalOptions,
    episode: usize,
    keep_trace: bool,
) -> Result<Episode> {
    let mut env_rng = ChaCha8Rng::seed_from_u64(opts.seed);
    env_rng.set_stream(2 * episode as u64 + 1);
    let mut pol_rng = ChaCha8Rng::seed_from_u64(opts.seed);
    pol_rng.set_stream(2 * episode as u64 + 2);
    let mut state = env.reset(&mut env_rng);
    let mut ep = Episode {
        ret: 0.0,
        len: 0,
        goal: None,
        trace: Vec::new(),
    };
    loop {
        let (raw, _) = q_guided_select(actor, q, &state.observation, opts.candidates, opts.steps, &mut pol_rng)?;
        let action: Vec<f64> = raw.iter().map(|x| if x.is_nan() { 0.0 } else { x.clamp(-1.0, 1.0) }).collect();
        let out = env.step(&action)?;
        if keep_trace {
            ep.trace.push(TraceRow {
                step: ep.len,
                obs: state.observation.clone(),
                action,
                reward: out.reward,
                done: out.done,
            });
        }
        ep.ret += out.reward;
        ep.len += 1;
        if out.done {
            ep.goal = out.goal;
            return Ok(ep);
        }
        state = out.state;
    }
}

fn thread_cap() -> Option<usize> {
    std::env::var(THREADS_VAR).ok()?.parse::<usize>().ok().filter(|&n| n >= 1)
}

/// Runs `opts.episodes` episodes, each with its own random streams derived
/// from `(seed, episode)`, so results do not depend on the thread count.
pub fn evaluate_with_traces(
    actor: &Actor,
    q: &(dyn QFunction + Sync),
    env: EnvKind,
    opts: &EvalOptions,
    keep_traces: bool,
) -> Result<(EvalReport, Vec<Vec<TraceRow>>)> {
    if opts.episodes == 0 {
        return Err(TrfpError::Usage("need at least one evaluation episode".into()));
    }
    let one = |i: usize| -> Result<Episode> {
        let mut e = env.build();
        run_episode(actor, q, e.as_mut(), opts, i, keep_traces)
    };
    let results: Vec<Result<Episode>> = match thread_cap() {
        Some(1) | None if rayon::current_num_threads() == 1 => (0..opts.episodes).map(one).collect(),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| TrfpError::Usage(e.to_string()))?
            .install(|| (0..opts.episodes).into_par_iter().map(one).collect()),
        None => (0..opts.episodes).into_par_iter().map(one).collect(),
    };
    let episodes = results.into_iter().collect::<Result<Vec<_>>>()?;
    let returns: Vec<f64> = episodes.iter().map(|e| e.ret).collect();
    let goals: Vec<Option<usize>> = episodes.iter().map(|e| e.goal).collect();
    let n_goals = env.build().num_goals();
    let mut counts = vec![0; n_goals];
    for g in goals.iter().flatten() {
        if *g < n_goals {
            counts[*g] += 1;
        }
    }
    let stats = Summary::of(&returns);
    let report = EvalReport {
        env,
        episodes: opts.episodes,
        steps_used: opts.steps,
        candidates: opts.candidates,
        mean_return: stats.mean,
        std_return: stats.std,
        returns,
        lengths: episodes.iter().map(|e| e.len).collect(),
        goals,
        mode_visit_counts: counts,
        diagnostics: None,
    };
    let traces = episodes.into_iter().map(|e| e.trace).collect();
    Ok((report, traces))
}

pub fn evaluate(actor: &Actor, q: &(dyn QFunction + Sync), env: EnvKind, opts: &EvalOptions) -> Result<EvalReport> {
    Ok(evaluate_with_traces(actor, q, env, opts, false)?.0)
}

/// Mean return of uniformly random actions, with the same per-episode
/// environment streams as [`evaluate`].
pub fn uniform_policy_return(env: EnvKind, episodes: usize, seed: u64) -> Result<f64> {
    if episodes == 0 {
        return Err(TrfpError::Usage("need at least one evaluation episode".into()));
    }
    let mut total = 0.0;
    for episode in 0..episodes {
        let mut e = env.build();
        let mut env_rng = ChaCha8Rng::seed_from_u64(seed);
        env_rng.set_stream(2 * episode as u64 + 1);
        let mut pol_rng = ChaCha8Rng::seed_from_u64(seed);
        pol_rng.set_stream(2 * episode as u64 + 2);
        e.reset(&mut env_rng);
        loop {
            let a: Vec<f64> = (0..e.action_dim()).map(|_| pol_rng.random_range(-1.0..=1.0)).collect();
            let out = e.step(&a)?;
            total += out.reward;
            if out.done {
                break;
            }
        }
    }
    Ok(total / episodes as f64)
}

/// `(fast - baseline) / (reference - baseline)`: the share of the reference
/// protocol's improvement over a baseline that a cheaper protocol keeps.
/// Meaningful for returns of either sign.
pub fn fidelity_ratio(fast: f64, reference: f64, baseline: f64) -> f64 {
    (fast - baseline) / (reference - baseline)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModeCoverage {
    pub counts: Vec<usize>,
    /// Every goal reached at least once.
    pub covered: bool,
    /// Smallest over largest count; 1 is perfectly balanced.
    pub balance: f64,
}

pub fn mode_coverage(report: &EvalReport) -> ModeCoverage {
    mode_coverage_of(&report.mode_visit_counts)
}

pub fn mode_coverage_of(counts: &[usize]) -> ModeCoverage {
    let max = counts.iter().copied().max().unwrap_or(0);
    let min = counts.iter().copied().min().unwrap_or(0);
    ModeCoverage {
        counts: counts.to_vec(),
        covered: !counts.is_empty() && min >= 1,
        balance: if max == 0 { 0.0 } else { min as f64 / max as f64 },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagnosticsReport {
    pub samples: usize,
    pub tau_cut: f64,
    /// Over noise-free `K`-step rollouts.
    pub straightness: Summary,
    /// Departure from constant velocity over the same rollouts.
    pub path_deviation: f64,
    /// Largest `|div v|` along each prefix.
    pub max_abs_divergence: Summary,
    /// `|delta_pre|` per prefix.
    pub abs_delta_pre: Summary,
    pub bound_holds: bool,
}

/// Number of Heun substeps used to integrate the prefix density change.
pub const DIAGNOSTIC_SUBSTEPS: usize = 20;

/// Visited-looking states: an environment reset followed by a random number
/// (below 20) of uniform random actions.
pub fn sample_states(env: EnvKind, samples: usize, rng: &mut dyn RngCore) -> Result<Array2<f64>> {
    let mut e = env.build();
    let mut out = Array2::zeros((samples, e.obs_dim()));
    for i in 0..samples {
        let mut state = e.reset(rng);
        let walk = rng.random_range(0..20);
        for _ in 0..walk {
            let a: Vec<f64> = (0..e.action_dim()).map(|_| rng.random_range(-1.0..=1.0)).collect();
            let o = e.step(&a)?;
            if o.done {
                break;
            }
            state = o.state;
        }
        out.row_mut(i).assign(&Array1::from(state.observation));
    }
    Ok(out)
}

/// Straightness and prefix density diagnostics at the given states. Pure:
/// the policy is only read.
pub fn flow_diagnostics_at(policy: &FlowPolicy, s: &Array2<f64>, rng: &mut dyn RngCore) -> Result<DiagnosticsReport> {
    let u0 = standard_normal((s.nrows(), policy.action_dim()), rng);
    let traj = policy.deterministic_trajectory(s, &u0, policy.schedule)?;
    let straight = straightness(&traj);
    let tau = policy.schedule.tau_cut();
    let (div, delta, holds) = if tau > 0.0 {
        let pre = prefix_logdensity_error(policy, s, &u0, tau, DIAGNOSTIC_SUBSTEPS)?;
        let holds = pre.bound_holds().into_iter().all(|b| b);
        (pre.max_abs_div.to_vec(), pre.delta_pre.mapv(f64::abs).to_vec(), holds)
    } else {
        (vec![0.0; s.nrows()], vec![0.0; s.nrows()], true)
    };
    Ok(DiagnosticsReport {
        samples: s.nrows(),
        tau_cut: tau,
        straightness: Summary::of(&straight.to_vec()),
        path_deviation: path_deviation(&traj),
        max_abs_divergence: Summary::of(&div),
        abs_delta_pre: Summary::of(&delta),
        bound_holds: holds,
    })
}

pub fn flow_diagnostics(policy: &FlowPolicy, env: EnvKind, samples: usize, seed: u64) -> Result<DiagnosticsReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = sample_states(env, samples, &mut rng)?;
    flow_diagnostics_at(policy, &s, &mut rng)
}
