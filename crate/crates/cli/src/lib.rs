//! Operator commands behind the `trfp` binary. Each command is a plain
//! function so that tests can drive it without a subprocess.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;

use trfp_core::envs::{EnvKind, TrajectoryWriter};
use trfp_core::eval::{evaluate_with_traces, flow_diagnostics, DiagnosticsReport, EvalOptions, EvalReport};
use trfp_core::trainer::{Ablation, Actor, Agent, TrainConfig, Trainer, UpdateMetrics};
use trfp_core::TrfpError;

/// Git revision and crate version of this build.
pub fn build_id() -> String {
    format!("trfp {} ({})", env!("CARGO_PKG_VERSION"), env!("TRFP_GIT_REV"))
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

/// Written to `<outdir>/manifest.json` before anything else, and rewritten
/// with the end time and status when the run stops.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub config_path: String,
    /// The config file exactly as read.
    pub config_text: String,
    /// Command-line changes applied on top of the file.
    pub overrides: Vec<String>,
    pub effective_config: TrainConfig,
    pub effective_config_text: String,
    pub build: String,
    pub seeds: Vec<u64>,
    pub outdir: String,
    pub started_at: String,
    pub finished_at: Option<String>,
    pub status: String,
}

impl RunManifest {
    fn write(&self, outdir: &Path) -> Result<()> {
        let path = outdir.join("manifest.json");
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }
}

#[derive(Debug, Clone)]
pub struct TrainArgs {
    pub config: PathBuf,
    pub seed: Option<u64>,
    pub outdir: PathBuf,
    pub total_steps: Option<usize>,
    pub ablate: Option<Ablation>,
}

/// Contents of `fault.json` when training stops on a non-finite value.
#[derive(Debug, Serialize)]
struct FaultDump<'a> {
    seed: u64,
    step: usize,
    message: String,
    last_update: Option<&'a UpdateMetrics>,
    checkpoint: String,
}

pub fn seed_dir(outdir: &Path, seed: u64) -> PathBuf {
    outdir.join(format!("seed_{seed}"))
}

pub fn checkpoint_name(step: usize) -> String {
    format!("checkpoint_{step:08}.trfp")
}

/// Trains every seed of the run, writing metrics, checkpoints and final
/// evaluations under `outdir/seed_<n>/`.
pub fn cmd_train(args: &TrainArgs) -> Result<RunManifest> {
    let config_text =
        fs::read_to_string(&args.config).with_context(|| format!("reading config {}", args.config.display()))?;
    let mut cfg = TrainConfig::parse(&config_text).with_context(|| format!("in {}", args.config.display()))?;
    let mut overrides = Vec::new();
    if let Some(n) = args.total_steps {
        cfg.total_steps = n;
        cfg.warmup_random_steps = cfg.warmup_random_steps.min(n);
        overrides.push(format!("total_steps = {n}"));
    }
    if let Some(a) = args.ablate {
        cfg.apply_ablation(a);
        overrides.push(format!("ablate = {}", a.as_str()));
    }
    if let Some(s) = args.seed {
        cfg.seeds = vec![s];
        overrides.push(format!("seeds = {s}"));
    }
    cfg.validate()?;

    fs::create_dir_all(&args.outdir).with_context(|| format!("creating {}", args.outdir.display()))?;
    let mut manifest = RunManifest {
        config_path: args.config.display().to_string(),
        config_text,
        overrides,
        effective_config_text: cfg.to_text(),
        effective_config: cfg.clone(),
        build: build_id(),
        seeds: cfg.seeds.clone(),
        outdir: args.outdir.display().to_string(),
        started_at: now(),
        finished_at: None,
        status: "running".into(),
    };
    manifest.write(&args.outdir)?;

    let mut outcome = Ok(());
    for &seed in &cfg.seeds {
        outcome = train_seed(&cfg, seed, &args.outdir);
        if outcome.is_err() {
            break;
        }
    }
    manifest.finished_at = Some(now());
    manifest.status = match &outcome {
        Ok(()) => "completed".into(),
        Err(e) if is_fault(e) => "fault".into(),
        Err(_) => "failed".into(),
    };
    manifest.write(&args.outdir)?;
    outcome.map(|()| manifest)
}

/// True when the error chain holds a training fault (non-finite values).
pub fn is_fault(e: &anyhow::Error) -> bool {
    e.chain()
        .any(|c| matches!(c.downcast_ref::<TrfpError>(), Some(TrfpError::TrainingFault(_))))
}

fn train_seed(cfg: &TrainConfig, seed: u64, outdir: &Path) -> Result<()> {
    let dir = seed_dir(outdir, seed);
    fs::create_dir_all(&dir)?;
    let mut metrics = BufWriter::new(File::create(dir.join("metrics.jsonl"))?);
    let mut trainer = Trainer::new(cfg.clone(), seed)?;
    let result = trainer.run(
        |rec| {
            serde_json::to_writer(&mut metrics, rec)?;
            metrics.write_all(b"\n")?;
            metrics.flush()?;
            eprintln!(
                "[seed {seed}] step {:>8} {:<6} return {:>10} critic {:>10} actor {:>10} alpha {:>8}",
                rec.step,
                rec.phase,
                fmt_opt(rec.episode_return),
                fmt_opt(rec.critic_loss),
                fmt_opt(rec.actor_loss),
                fmt_opt(rec.alpha)
            );
            Ok(())
        },
        |step, agent| agent.save(dir.join(checkpoint_name(step))),
    );
    metrics.flush()?;
    if let Err(e) = result {
        if let TrfpError::TrainingFault(msg) = &e {
            let ckpt = dir.join("fault.trfp");
            trainer.agent.save(&ckpt)?;
            let dump = FaultDump {
                seed,
                step: trainer.steps_done(),
                message: msg.clone(),
                last_update: trainer.last_update(),
                checkpoint: ckpt.display().to_string(),
            };
            fs::write(dir.join("fault.json"), serde_json::to_string_pretty(&dump)? + "\n")?;
        }
        return Err(anyhow::Error::new(e).context(format!("seed {seed}")));
    }
    trainer.agent.save(dir.join("final.trfp"))?;

    for &steps in &cfg.eval_steps {
        let opts = EvalOptions {
            episodes: cfg.eval_episodes,
            steps,
            candidates: cfg.effective_candidates(),
            seed,
        };
        let agent = &trainer.agent;
        let (report, _) = evaluate_with_traces(&agent.actor, &agent.critic, cfg.env, &opts, false)?;
        let path = dir.join(format!("eval_steps{steps}_n{}.json", opts.candidates));
        fs::write(&path, serde_json::to_string_pretty(&report)? + "\n")?;
        eprintln!(
            "[seed {seed}] eval steps={steps} N={}: return {:.2} +- {:.2}",
            opts.candidates, report.mean_return, report.std_return
        );
    }
    Ok(())
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "-".into(), |v| format!("{v:.4}"))
}

#[derive(Debug, Clone)]
pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub env: Option<EnvKind>,
    pub episodes: usize,
    pub steps: usize,
    pub candidates: usize,
    pub seed: u64,
    pub outdir: PathBuf,
    pub trace_csv: bool,
}

fn load_agent(path: &Path, env: Option<EnvKind>) -> Result<Agent> {
    let agent = Agent::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    if let Some(e) = env {
        if e != agent.env {
            bail!("checkpoint {} was trained on {}, not {e}", path.display(), agent.env);
        }
    }
    Ok(agent)
}

/// Evaluates a checkpoint; returns the report and the path it was written to.
pub fn cmd_eval(args: &EvalArgs) -> Result<(EvalReport, PathBuf)> {
    if args.steps == 0 || args.candidates == 0 {
        bail!("--steps and --candidates must be at least 1");
    }
    let agent = load_agent(&args.checkpoint, args.env)?;
    let opts = EvalOptions {
        episodes: args.episodes,
        steps: args.steps,
        candidates: args.candidates,
        seed: args.seed,
    };
    let (report, traces) = evaluate_with_traces(&agent.actor, &agent.critic, agent.env, &opts, args.trace_csv)?;
    fs::create_dir_all(&args.outdir)?;
    let stem = format!("eval_{}_steps{}_n{}_seed{}", agent.env, args.steps, args.candidates, args.seed);
    let path = args.outdir.join(format!("{stem}.json"));
    fs::write(&path, serde_json::to_string_pretty(&report)? + "\n")?;
    if args.trace_csv {
        let env = agent.env.build();
        let file = BufWriter::new(File::create(args.outdir.join(format!("{stem}.csv")))?);
        let mut w = TrajectoryWriter::new(file, env.obs_dim(), env.action_dim())?;
        for (episode, rows) in traces.iter().enumerate() {
            for r in rows {
                w.row(episode, r.step, &r.obs, &r.action, r.reward, r.done)?;
            }
        }
        w.into_inner().flush()?;
    }
    Ok((report, path))
}

#[derive(Debug, Clone)]
pub struct DiagnoseArgs {
    pub checkpoint: PathBuf,
    pub samples: usize,
    pub seed: u64,
    pub outdir: PathBuf,
}

/// Flow diagnostics of a checkpoint's policy, written as JSON.
pub fn cmd_diagnose(args: &DiagnoseArgs) -> Result<(DiagnosticsReport, PathBuf)> {
    if args.samples == 0 {
        bail!("--samples must be at least 1");
    }
    let agent = load_agent(&args.checkpoint, None)?;
    let Actor::Flow(policy) = &agent.actor else {
        bail!("diagnostics need a flow policy; {} holds a Gaussian baseline", args.checkpoint.display());
    };
    let report = flow_diagnostics(policy, agent.env, args.samples, args.seed)?;
    fs::create_dir_all(&args.outdir)?;
    let path = args.outdir.join("diagnostics.json");
    fs::write(&path, serde_json::to_string_pretty(&report)? + "\n")?;
    Ok((report, path))
}
