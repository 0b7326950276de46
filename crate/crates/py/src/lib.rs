//! Python bindings. Arrays cross the boundary as nested lists of floats and
//! reports as plain dicts, so the module has no numpy dependency.

use std::collections::HashMap;

use ndarray::Array2;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyAny;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use trfp_core::envs::{Env as CoreEnv, EnvKind};
use trfp_core::eval::{self, EvalOptions};
use trfp_core::flow_policy::standard_normal;
use trfp_core::trainer::{self, Actor, TrainConfig as CoreConfig, Trainer as CoreTrainer};
use trfp_core::TrfpError;

fn to_py_err(e: TrfpError) -> PyErr {
    match e {
        TrfpError::TrainingFault(_) | TrfpError::Io(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Serializes through JSON and decodes with Python's `json` module.
fn to_dict<'py>(py: Python<'py>, value: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn parse_env(name: &str) -> PyResult<EnvKind> {
    name.parse().map_err(to_py_err)
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("rows have different lengths"));
    }
    Array2::from_shape_vec((n, d), rows.into_iter().flatten().collect())
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

fn rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.outer_iter().map(|r| r.to_vec()).collect()
}

/// A native environment with its own seeded random stream.
#[pyclass(unsendable)]
struct Env {
    inner: Box<dyn CoreEnv>,
    rng: ChaCha8Rng,
}

#[pymethods]
impl Env {
    #[new]
    #[pyo3(signature = (name, seed=0))]
    fn new(name: &str, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: parse_env(name)?.build(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    #[getter]
    fn name(&self) -> &'static str {
        self.inner.name()
    }

    #[getter]
    fn obs_dim(&self) -> usize {
        self.inner.obs_dim()
    }

    #[getter]
    fn action_dim(&self) -> usize {
        self.inner.action_dim()
    }

    #[getter]
    fn max_steps(&self) -> usize {
        self.inner.max_steps()
    }

    #[getter]
    fn num_goals(&self) -> usize {
        self.inner.num_goals()
    }

    fn reset(&mut self) -> Vec<f64> {
        self.inner.reset(&mut self.rng).observation
    }

    /// Returns `(observation, reward, done, truncated, goal)`.
    fn step(&mut self, action: Vec<f64>) -> PyResult<(Vec<f64>, f64, bool, bool, Option<usize>)> {
        let out = self.inner.step(&action).map_err(to_py_err)?;
        Ok((out.state.observation, out.reward, out.done, out.truncated, out.goal))
    }
}

/// Training configuration in the `key = value` text format.
#[pyclass(skip_from_py_object)]
#[derive(Clone)]
struct TrainConfig {
    inner: CoreConfig,
}

#[pymethods]
impl TrainConfig {
    #[staticmethod]
    fn reference(env: &str) -> PyResult<Self> {
        Ok(Self {
            inner: CoreConfig::reference(parse_env(env)?),
        })
    }

    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: CoreConfig::parse(text).map_err(to_py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: CoreConfig::load(path).map_err(to_py_err)?,
        })
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    /// A copy with the given keys replaced, e.g. `{"total_steps": "500"}`.
    fn with_values(&self, values: HashMap<String, String>) -> PyResult<Self> {
        let mut seen = 0;
        let text: String = self
            .inner
            .to_text()
            .lines()
            .map(|line| {
                let key = line.split('=').next().unwrap_or("").trim();
                match values.get(key) {
                    Some(v) => {
                        seen += 1;
                        format!("{key} = {v}\n")
                    }
                    None => format!("{line}\n"),
                }
            })
            .collect();
        if seen != values.len() {
            let unknown: Vec<&String> = values.keys().filter(|k| !trainer::KEYS.contains(&k.as_str())).collect();
            return Err(PyValueError::new_err(format!("unknown config keys: {unknown:?}")));
        }
        Self::parse(&text)
    }

    fn as_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_dict(py, &self.inner)
    }

    fn __repr__(&self) -> String {
        format!("TrainConfig(env={}, policy={})", self.inner.env, self.inner.policy.as_str())
    }
}

/// A trained or in-training agent: actor, twin critic and temperature.
#[pyclass(skip_from_py_object)]
#[derive(Clone)]
struct Agent {
    inner: trainer::Agent,
}

#[pymethods]
impl Agent {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: trainer::Agent::load(path).map_err(to_py_err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(to_py_err)
    }

    #[getter]
    fn env(&self) -> String {
        self.inner.env.to_string()
    }

    #[getter]
    fn policy(&self) -> &'static str {
        self.inner.actor.kind().as_str()
    }

    #[getter]
    fn alpha(&self) -> f64 {
        self.inner.temperature.alpha()
    }

    /// Deterministic evaluation action; with `candidates > 1`, the best of
    /// that many draws under the critic.
    #[pyo3(signature = (obs, steps=4, candidates=1, seed=0))]
    fn act(&self, obs: Vec<f64>, steps: usize, candidates: usize, seed: u64) -> PyResult<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        eval::q_guided_select(&self.inner.actor, &self.inner.critic, &obs, candidates, steps, &mut rng)
            .map(|(a, _)| a)
            .map_err(to_py_err)
    }

    /// Training-time draws from the hybrid sampler for a batch of states:
    /// returns `(actions, surrogate_logp)`.
    #[pyo3(signature = (states, seed=0))]
    fn sample(&self, states: Vec<Vec<f64>>, seed: u64) -> PyResult<(Vec<Vec<f64>>, Vec<f64>)> {
        let Actor::Flow(policy) = &self.inner.actor else {
            return Err(PyValueError::new_err("sampling chains needs a flow policy"));
        };
        let s = matrix(states)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (action, chain) = policy.sample_hybrid(&s, &mut rng, policy.schedule).map_err(to_py_err)?;
        Ok((rows(&action), chain.surrogate_logp().to_vec()))
    }

    /// Noise-free `steps`-step actions from given prior draws.
    #[pyo3(signature = (states, u0=None, steps=4, seed=0))]
    fn eval_actions(
        &self,
        states: Vec<Vec<f64>>,
        u0: Option<Vec<Vec<f64>>>,
        steps: usize,
        seed: u64,
    ) -> PyResult<Vec<Vec<f64>>> {
        let s = matrix(states)?;
        let u0 = match u0 {
            Some(u) => matrix(u)?,
            None => standard_normal(
                (s.nrows(), self.inner.actor.action_dim()),
                &mut ChaCha8Rng::seed_from_u64(seed),
            ),
        };
        Ok(rows(&self.inner.actor.eval_action(&s, &u0, steps).map_err(to_py_err)?))
    }

    #[pyo3(signature = (episodes=20, steps=4, candidates=4, seed=0))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        episodes: usize,
        steps: usize,
        candidates: usize,
        seed: u64,
    ) -> PyResult<Bound<'py, PyAny>> {
        let opts = EvalOptions {
            episodes,
            steps,
            candidates,
            seed,
        };
        let report =
            eval::evaluate(&self.inner.actor, &self.inner.critic, self.inner.env, &opts).map_err(to_py_err)?;
        to_dict(py, &report)
    }

    /// Straightness, divergence and prefix-density diagnostics.
    #[pyo3(signature = (samples=256, seed=0))]
    fn diagnose<'py>(&self, py: Python<'py>, samples: usize, seed: u64) -> PyResult<Bound<'py, PyAny>> {
        let Actor::Flow(policy) = &self.inner.actor else {
            return Err(PyValueError::new_err("diagnostics need a flow policy"));
        };
        let report = eval::flow_diagnostics(policy, self.inner.env, samples, seed).map_err(to_py_err)?;
        to_dict(py, &report)
    }
}

#[pyclass(unsendable)]
struct Trainer {
    inner: CoreTrainer,
}

#[pymethods]
impl Trainer {
    #[new]
    fn new(config: &TrainConfig, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: CoreTrainer::new(config.inner.clone(), seed).map_err(to_py_err)?,
        })
    }

    #[getter]
    fn steps_done(&self) -> usize {
        self.inner.steps_done()
    }

    /// One environment step; returns the update's metrics once updates run.
    fn step<'py>(&mut self, py: Python<'py>) -> PyResult<Option<Bound<'py, PyAny>>> {
        match self.inner.step().map_err(to_py_err)? {
            Some(m) => Ok(Some(to_dict(py, &m)?)),
            None => Ok(None),
        }
    }

    /// Runs `n` steps and returns the metrics of the last update, if any.
    fn run_steps<'py>(&mut self, py: Python<'py>, n: usize) -> PyResult<Option<Bound<'py, PyAny>>> {
        for _ in 0..n {
            self.inner.step().map_err(to_py_err)?;
        }
        self.inner.last_update().map(|m| to_dict(py, m)).transpose()
    }

    fn agent(&self) -> Agent {
        Agent {
            inner: self.inner.agent.clone(),
        }
    }
}

/// Mean return of uniformly random actions under the evaluation streams.
#[pyfunction]
fn uniform_policy_return(env: &str, episodes: usize, seed: u64) -> PyResult<f64> {
    eval::uniform_policy_return(parse_env(env)?, episodes, seed).map_err(to_py_err)
}

/// `(fast - baseline) / (reference - baseline)`.
#[pyfunction]
fn fidelity_ratio(fast: f64, reference: f64, baseline: f64) -> f64 {
    eval::fidelity_ratio(fast, reference, baseline)
}

#[pymodule]
fn trfp(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Env>()?;
    m.add_class::<TrainConfig>()?;
    m.add_class::<Agent>()?;
    m.add_class::<Trainer>()?;
    m.add_function(wrap_pyfunction!(uniform_policy_return, m)?)?;
    m.add_function(wrap_pyfunction!(fidelity_ratio, m)?)?;
    Ok(())
}
