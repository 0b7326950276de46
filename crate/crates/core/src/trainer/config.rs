//! Flat `key = value` training configuration.
//!
//! Every key must be present exactly once; unknown keys are rejected so a
//! misspelt hyperparameter cannot silently fall back to a default.

use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use crate::envs::EnvKind;
use crate::error::{Result, TrfpError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Trfp,
    GaussianSac,
}

impl PolicyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PolicyKind::Trfp => "trfp",
            PolicyKind::GaussianSac => "gaussian_sac",
        }
    }
}

impl FromStr for PolicyKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "trfp" => Ok(PolicyKind::Trfp),
            "gaussian_sac" => Ok(PolicyKind::GaussianSac),
            other => Err(format!("unknown policy `{other}` (expected trfp or gaussian_sac)")),
        }
    }
}

/// `auto` resolves to `-action_dim`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetEntropy {
    Auto,
    Value(f64),
}

impl TargetEntropy {
    pub fn resolve(self, action_dim: usize) -> f64 {
        match self {
            TargetEntropy::Auto => -(action_dim as f64),
            TargetEntropy::Value(v) => v,
        }
    }
}

impl fmt::Display for TargetEntropy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TargetEntropy::Auto => f.write_str("auto"),
            TargetEntropy::Value(v) => write!(f, "{v}"),
        }
    }
}

impl FromStr for TargetEntropy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "auto" {
            return Ok(TargetEntropy::Auto);
        }
        s.parse::<f64>()
            .map(TargetEntropy::Value)
            .map_err(|_| format!("expected `auto` or a number, got `{s}`"))
    }
}

/// Ablation switches selectable from the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// No straightening term.
    NoFm,
    /// One evaluation candidate instead of `candidates`.
    NoQguide,
    /// Tail noise scale pinned to `sigma_min`.
    NoTail,
}

impl Ablation {
    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::NoFm => "no_fm",
            Ablation::NoQguide => "no_qguide",
            Ablation::NoTail => "no_tail",
        }
    }
}

impl FromStr for Ablation {
    type Err = TrfpError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "no_fm" => Ok(Ablation::NoFm),
            "no_qguide" => Ok(Ablation::NoQguide),
            "no_tail" => Ok(Ablation::NoTail),
            other => Err(TrfpError::Usage(format!(
                "unknown ablation `{other}` (expected no_fm, no_qguide or no_tail)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainConfig {
    pub env: EnvKind,
    pub policy: PolicyKind,
    /// Number of sampler steps.
    pub k: usize,
    /// Number of stochastic tail steps.
    pub l: usize,
    pub gamma: f64,
    pub batch: usize,
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub lr_alpha: f64,
    pub lambda_fm: f64,
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub sigma_hidden: Vec<usize>,
    pub buffer: usize,
    /// Evaluation step counts; the first is the standard protocol.
    pub eval_steps: Vec<usize>,
    pub candidates: usize,
    pub seeds: Vec<u64>,
    pub total_steps: usize,
    pub warmup_random_steps: usize,
    pub tau_polyak: f64,
    pub init_alpha: f64,
    pub target_entropy: TargetEntropy,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub sigma_init: f64,
    pub grad_clip: f64,
    pub log_interval: usize,
    pub checkpoint_interval: usize,
    pub eval_episodes: usize,
    pub no_fm: bool,
    pub no_qguide: bool,
    pub no_tail: bool,
}

/// Key names in canonical order.
pub const KEYS: [&str; 32] = [
    "env",
    "policy",
    "K",
    "L",
    "gamma",
    "batch",
    "lr_actor",
    "lr_critic",
    "lr_alpha",
    "lambda_fm",
    "actor_hidden",
    "critic_hidden",
    "sigma_hidden",
    "buffer",
    "eval_steps",
    "candidates",
    "seeds",
    "total_steps",
    "warmup_random_steps",
    "tau_polyak",
    "init_alpha",
    "target_entropy",
    "sigma_min",
    "sigma_max",
    "sigma_init",
    "grad_clip",
    "log_interval",
    "checkpoint_interval",
    "eval_episodes",
    "no_fm",
    "no_qguide",
    "no_tail",
];

fn join<T: fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_list<T: FromStr>(key: &str, raw: &str) -> Result<Vec<T>> {
    let items: std::result::Result<Vec<T>, _> = raw.split(',').map(|p| p.trim().parse::<T>()).collect();
    match items {
        Ok(v) if !v.is_empty() => Ok(v),
        _ => Err(TrfpError::config(key, format!("expected a comma-separated list, got `{raw}`"))),
    }
}

fn parse_scalar<T: FromStr>(key: &str, raw: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    raw.parse::<T>()
        .map_err(|e| TrfpError::config(key, format!("cannot parse `{raw}`: {e}")))
}

fn parse_bool(key: &str, raw: &str) -> Result<bool> {
    match raw {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(TrfpError::config(key, format!("expected true or false, got `{raw}`"))),
    }
}

impl TrainConfig {
    /// Defaults for the full-size setting; the desk-scale files under
    /// `configs/` shrink networks, batch and step counts.
    pub fn reference(env: EnvKind) -> Self {
        Self {
            env,
            policy: PolicyKind::Trfp,
            k: 4,
            l: 1,
            gamma: 0.99,
            batch: 256,
            lr_actor: 3e-4,
            lr_critic: 3e-4,
            lr_alpha: 3e-4,
            lambda_fm: 0.1,
            actor_hidden: vec![256, 256, 256],
            critic_hidden: vec![256, 256, 256],
            sigma_hidden: vec![64],
            buffer: 1_000_000,
            eval_steps: vec![4, 1],
            candidates: 4,
            seeds: vec![0, 1, 2, 3, 4],
            total_steps: 1_000_000,
            warmup_random_steps: 5000,
            tau_polyak: 0.005,
            init_alpha: 0.2,
            target_entropy: TargetEntropy::Auto,
            sigma_min: 1e-3,
            sigma_max: 0.5,
            sigma_init: 0.1,
            grad_clip: 10.0,
            log_interval: 1000,
            checkpoint_interval: 10_000,
            eval_episodes: 20,
            no_fm: false,
            no_qguide: false,
            no_tail: false,
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut values: Vec<Option<String>> = vec![None; KEYS.len()];
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                TrfpError::config(line, format!("line {} is not of the form key = value", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            let slot = KEYS
                .iter()
                .position(|k| *k == key)
                .ok_or_else(|| TrfpError::config(key, "unknown key"))?;
            if values[slot].is_some() {
                return Err(TrfpError::config(key, "given more than once"));
            }
            values[slot] = Some(value.to_string());
        }
        let get = |key: &str| -> Result<&str> {
            let slot = KEYS.iter().position(|k| *k == key).expect("known key");
            values[slot]
                .as_deref()
                .ok_or_else(|| TrfpError::config(key, "missing"))
        };
        let cfg = Self {
            env: get("env")?.parse().map_err(|e: TrfpError| TrfpError::config("env", e.to_string()))?,
            policy: parse_scalar("policy", get("policy")?)?,
            k: parse_scalar("K", get("K")?)?,
            l: parse_scalar("L", get("L")?)?,
            gamma: parse_scalar("gamma", get("gamma")?)?,
            batch: parse_scalar("batch", get("batch")?)?,
            lr_actor: parse_scalar("lr_actor", get("lr_actor")?)?,
            lr_critic: parse_scalar("lr_critic", get("lr_critic")?)?,
            lr_alpha: parse_scalar("lr_alpha", get("lr_alpha")?)?,
            lambda_fm: parse_scalar("lambda_fm", get("lambda_fm")?)?,
            actor_hidden: parse_list("actor_hidden", get("actor_hidden")?)?,
            critic_hidden: parse_list("critic_hidden", get("critic_hidden")?)?,
            sigma_hidden: parse_list("sigma_hidden", get("sigma_hidden")?)?,
            buffer: parse_scalar("buffer", get("buffer")?)?,
            eval_steps: parse_list("eval_steps", get("eval_steps")?)?,
            candidates: parse_scalar("candidates", get("candidates")?)?,
            seeds: parse_list("seeds", get("seeds")?)?,
            total_steps: parse_scalar("total_steps", get("total_steps")?)?,
            warmup_random_steps: parse_scalar("warmup_random_steps", get("warmup_random_steps")?)?,
            tau_polyak: parse_scalar("tau_polyak", get("tau_polyak")?)?,
            init_alpha: parse_scalar("init_alpha", get("init_alpha")?)?,
            target_entropy: parse_scalar("target_entropy", get("target_entropy")?)?,
            sigma_min: parse_scalar("sigma_min", get("sigma_min")?)?,
            sigma_max: parse_scalar("sigma_max", get("sigma_max")?)?,
            sigma_init: parse_scalar("sigma_init", get("sigma_init")?)?,
            grad_clip: parse_scalar("grad_clip", get("grad_clip")?)?,
            log_interval: parse_scalar("log_interval", get("log_interval")?)?,
            checkpoint_interval: parse_scalar("checkpoint_interval", get("checkpoint_interval")?)?,
            eval_episodes: parse_scalar("eval_episodes", get("eval_episodes")?)?,
            no_fm: parse_bool("no_fm", get("no_fm")?)?,
            no_qguide: parse_bool("no_qguide", get("no_qguide")?)?,
            no_tail: parse_bool("no_tail", get("no_tail")?)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, key: &str, msg: &str| if ok { Ok(()) } else { Err(TrfpError::config(key, msg)) };
        check(self.k >= 1, "K", "must be at least 1")?;
        check(self.l >= 1 && self.l <= self.k, "L", "must satisfy 1 <= L <= K")?;
        check((0.0..=1.0).contains(&self.gamma), "gamma", "must lie in [0, 1]")?;
        check(self.batch >= 1, "batch", "must be positive")?;
        check(self.buffer >= self.batch, "buffer", "must hold at least one batch")?;
        for (key, lr) in [("lr_actor", self.lr_actor), ("lr_critic", self.lr_critic), ("lr_alpha", self.lr_alpha)] {
            check(lr >= 0.0 && lr.is_finite(), key, "must be a non-negative number")?;
        }
        check(self.lambda_fm >= 0.0, "lambda_fm", "must be non-negative")?;
        check(self.eval_steps.iter().all(|&s| s >= 1), "eval_steps", "every entry must be at least 1")?;
        check(self.candidates >= 1, "candidates", "must be at least 1")?;
        check(self.tau_polyak > 0.0 && self.tau_polyak <= 1.0, "tau_polyak", "must lie in (0, 1]")?;
        check(self.init_alpha > 0.0, "init_alpha", "must be positive")?;
        check(
            self.sigma_min > 0.0 && self.sigma_min < self.sigma_init && self.sigma_init < self.sigma_max,
            "sigma_init",
            "must satisfy 0 < sigma_min < sigma_init < sigma_max",
        )?;
        check(self.grad_clip > 0.0, "grad_clip", "must be positive")?;
        check(self.log_interval >= 1, "log_interval", "must be positive")?;
        check(self.checkpoint_interval >= 1, "checkpoint_interval", "must be positive")?;
        check(self.eval_episodes >= 1, "eval_episodes", "must be positive")?;
        Ok(())
    }

    /// Canonical text; `parse(to_text(c)) == c`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        put("env", self.env.to_string());
        put("policy", self.policy.as_str().into());
        put("K", self.k.to_string());
        put("L", self.l.to_string());
        put("gamma", self.gamma.to_string());
        put("batch", self.batch.to_string());
        put("lr_actor", self.lr_actor.to_string());
        put("lr_critic", self.lr_critic.to_string());
        put("lr_alpha", self.lr_alpha.to_string());
        put("lambda_fm", self.lambda_fm.to_string());
        put("actor_hidden", join(&self.actor_hidden));
        put("critic_hidden", join(&self.critic_hidden));
        put("sigma_hidden", join(&self.sigma_hidden));
        put("buffer", self.buffer.to_string());
        put("eval_steps", join(&self.eval_steps));
        put("candidates", self.candidates.to_string());
        put("seeds", join(&self.seeds));
        put("total_steps", self.total_steps.to_string());
        put("warmup_random_steps", self.warmup_random_steps.to_string());
        put("tau_polyak", self.tau_polyak.to_string());
        put("init_alpha", self.init_alpha.to_string());
        put("target_entropy", self.target_entropy.to_string());
        put("sigma_min", self.sigma_min.to_string());
        put("sigma_max", self.sigma_max.to_string());
        put("sigma_init", self.sigma_init.to_string());
        put("grad_clip", self.grad_clip.to_string());
        put("log_interval", self.log_interval.to_string());
        put("checkpoint_interval", self.checkpoint_interval.to_string());
        put("eval_episodes", self.eval_episodes.to_string());
        put("no_fm", self.no_fm.to_string());
        put("no_qguide", self.no_qguide.to_string());
        put("no_tail", self.no_tail.to_string());
        out
    }

    /// Turns on an ablation and the setting it implies.
    pub fn apply_ablation(&mut self, ablation: Ablation) {
        match ablation {
            Ablation::NoFm => {
                self.no_fm = true;
                self.lambda_fm = 0.0;
            }
            Ablation::NoQguide => {
                self.no_qguide = true;
                self.candidates = 1;
            }
            Ablation::NoTail => self.no_tail = true,
        }
    }

    pub fn effective_lambda_fm(&self) -> f64 {
        if self.no_fm {
            0.0
        } else {
            self.lambda_fm
        }
    }

    pub fn effective_candidates(&self) -> usize {
        if self.no_qguide {
            1
        } else {
            self.candidates
        }
    }
}
