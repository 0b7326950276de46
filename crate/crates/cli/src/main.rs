use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use trfp_cli::{cmd_diagnose, cmd_eval, cmd_train, is_fault, DiagnoseArgs, EvalArgs, TrainArgs};
use trfp_core::envs::EnvKind;
use trfp_core::trainer::Ablation;

#[derive(Parser)]
#[command(name = "trfp", version, about = "Truncated rectified flow policies: train, evaluate, diagnose")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every seed of a config (or just --seed).
    Train(TrainOpts),
    /// Train with one ablation switched on.
    Ablate {
        #[command(flatten)]
        opts: TrainOpts,
        /// no_fm, no_qguide or no_tail
        #[arg(long)]
        ablate: Ablation,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Must match the environment the checkpoint was trained on.
        #[arg(long)]
        env: Option<EnvKind>,
        #[arg(long, default_value_t = 20)]
        episodes: usize,
        /// ODE steps over [0, 1] per action.
        #[arg(long, default_value_t = 4)]
        steps: usize,
        /// Candidates per state for Q-guided selection.
        #[arg(long, default_value_t = 4)]
        candidates: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = ".")]
        outdir: PathBuf,
        /// Also write per-step trajectories as CSV.
        #[arg(long)]
        trace_csv: bool,
    },
    /// Straightness, divergence and prefix density diagnostics.
    Diagnose {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 256)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = ".")]
        outdir: PathBuf,
    },
}

#[derive(Args)]
struct TrainOpts {
    #[arg(long)]
    config: PathBuf,
    /// Run only this seed instead of the config's seed list.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "runs")]
    outdir: PathBuf,
    /// Override total_steps (warmup is capped to match).
    #[arg(long)]
    total_steps: Option<usize>,
}

impl TrainOpts {
    fn into_args(self, ablate: Option<Ablation>) -> TrainArgs {
        TrainArgs {
            config: self.config,
            seed: self.seed,
            outdir: self.outdir,
            total_steps: self.total_steps,
            ablate,
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train(opts) => {
            let m = cmd_train(&opts.into_args(None))?;
            println!("run complete: {}", m.outdir);
        }
        Command::Ablate { opts, ablate } => {
            let m = cmd_train(&opts.into_args(Some(ablate)))?;
            println!("ablation {} complete: {}", ablate.as_str(), m.outdir);
        }
        Command::Eval {
            checkpoint,
            env,
            episodes,
            steps,
            candidates,
            seed,
            outdir,
            trace_csv,
        } => {
            let (r, path) = cmd_eval(&EvalArgs {
                checkpoint,
                env,
                episodes,
                steps,
                candidates,
                seed,
                outdir,
                trace_csv,
            })?;
            println!(
                "{} steps={} N={}: mean return {:.3} +- {:.3} over {} episodes -> {}",
                r.env,
                r.steps_used,
                r.candidates,
                r.mean_return,
                r.std_return,
                r.episodes,
                path.display()
            );
            if !r.mode_visit_counts.is_empty() {
                println!("goal visits: {:?}", r.mode_visit_counts);
            }
        }
        Command::Diagnose {
            checkpoint,
            samples,
            seed,
            outdir,
        } => {
            let (r, path) = cmd_diagnose(&DiagnoseArgs {
                checkpoint,
                samples,
                seed,
                outdir,
            })?;
            println!(
                "straightness {:.4}, path deviation {:.4}, max |div v| {:.4}, |delta_pre| {:.4}, bound holds: {} -> {}",
                r.straightness.mean,
                r.path_deviation,
                r.max_abs_divergence.max,
                r.abs_delta_pre.mean,
                r.bound_holds,
                path.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_fault(&e) {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
