use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use trfp_cli::{cmd_diagnose, cmd_eval, cmd_train, seed_dir, DiagnoseArgs, EvalArgs, TrainArgs};
use trfp_core::critic::CriticEnsemble;
use trfp_core::diffcore::{Activation, MlpParams, OutputInit};
use trfp_core::envs::EnvKind;
use trfp_core::flow_policy::{FlowPolicy, HybridSchedule};
use trfp_core::trainer::{Ablation, Actor, Agent, Temperature, TrainConfig};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_trfp"))
}

/// A small pendulum config written into `dir`.
fn small_config(dir: &Path, edit: impl FnOnce(&mut TrainConfig)) -> PathBuf {
    let mut cfg = TrainConfig::reference(EnvKind::Pendulum);
    cfg.actor_hidden = vec![16, 16];
    cfg.critic_hidden = vec![16, 16];
    cfg.sigma_hidden = vec![8];
    cfg.batch = 16;
    cfg.buffer = 5000;
    cfg.total_steps = 400;
    cfg.warmup_random_steps = 100;
    cfg.log_interval = 100;
    cfg.checkpoint_interval = 200;
    cfg.eval_episodes = 2;
    cfg.seeds = vec![3];
    edit(&mut cfg);
    let path = dir.join("run.cfg");
    fs::write(&path, cfg.to_text()).unwrap();
    path
}

fn train_args(config: PathBuf, outdir: PathBuf) -> TrainArgs {
    TrainArgs {
        config,
        seed: None,
        outdir,
        total_steps: None,
        ablate: None,
    }
}

fn manifest(outdir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(outdir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn smoke_run_writes_manifest_metrics_and_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), |_| {});
    let out = tmp.path().join("out");
    let mut args = train_args(cfg.clone(), out.clone());
    args.total_steps = Some(100);
    cmd_train(&args).unwrap();

    let m = manifest(&out);
    assert_eq!(m["config_text"].as_str().unwrap(), fs::read_to_string(&cfg).unwrap());
    assert_eq!(m["status"], "completed");
    assert_eq!(m["effective_config"]["total_steps"], 100);
    assert!(m["finished_at"].is_string());
    assert!(m["build"].as_str().unwrap().starts_with("trfp "));

    let dir = seed_dir(&out, 3);
    let metrics = fs::read_to_string(dir.join("metrics.jsonl")).unwrap();
    assert!(metrics.lines().count() >= 1);
    assert!(dir.join("final.trfp").exists());
    assert!(dir.join("eval_steps4_n4.json").exists());
    assert!(dir.join("eval_steps1_n4.json").exists());
}

#[test]
fn manifest_is_the_first_output() {
    // A run that fails at the first update still leaves a manifest behind.
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), |c| c.lr_critic = 1e300);
    let out = tmp.path().join("out");
    let err = cmd_train(&train_args(cfg, out.clone())).unwrap_err();
    assert!(trfp_cli::is_fault(&err), "{err:#}");
    assert_eq!(manifest(&out)["status"], "fault");
}

#[test]
fn same_seed_gives_identical_metric_files() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), |_| {});
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    cmd_train(&train_args(cfg.clone(), a.clone())).unwrap();
    cmd_train(&train_args(cfg, b.clone())).unwrap();
    let read = |d: &Path| fs::read(seed_dir(d, 3).join("metrics.jsonl")).unwrap();
    assert_eq!(read(&a), read(&b));
    let ck = |d: &Path| fs::read(seed_dir(d, 3).join("checkpoint_00000200.trfp")).unwrap();
    assert_eq!(ck(&a), ck(&b));
}

#[test]
fn missing_key_is_named() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), |_| {});
    let text: String = fs::read_to_string(&cfg)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with("tau_polyak"))
        .map(|l| format!("{l}\n"))
        .collect();
    fs::write(&cfg, text).unwrap();
    let out = bin()
        .args(["train", "--config"])
        .arg(&cfg)
        .arg("--outdir")
        .arg(tmp.path().join("out"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("tau_polyak"), "{stderr}");
    assert!(!tmp.path().join("out").exists());
}

#[test]
fn nan_fault_exits_nonzero_with_dump() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), |c| c.lr_critic = 1e300);
    let out_dir = tmp.path().join("out");
    let out = bin()
        .args(["train", "--config"])
        .arg(&cfg)
        .arg("--outdir")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let dump: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(seed_dir(&out_dir, 3).join("fault.json")).unwrap()).unwrap();
    assert!(dump["message"].as_str().unwrap().contains("step"));
    assert!(seed_dir(&out_dir, 3).join("fault.trfp").exists());
}

fn trained_checkpoint(tmp: &Path) -> PathBuf {
    let cfg = small_config(tmp, |_| {});
    let out = tmp.join("trained");
    cmd_train(&train_args(cfg, out.clone())).unwrap();
    seed_dir(&out, 3).join("final.trfp")
}

fn eval_args(checkpoint: PathBuf, outdir: PathBuf, steps: usize) -> EvalArgs {
    EvalArgs {
        checkpoint,
        env: None,
        episodes: 3,
        steps,
        candidates: 4,
        seed: 11,
        outdir,
        trace_csv: false,
    }
}

#[test]
fn eval_accepts_both_protocols_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let ck = trained_checkpoint(tmp.path());
    let out = tmp.path().join("eval");
    let (r4, _) = cmd_eval(&eval_args(ck.clone(), out.clone(), 4)).unwrap();
    let (r1, path) = cmd_eval(&eval_args(ck.clone(), out.clone(), 1)).unwrap();
    assert_eq!((r4.steps_used, r1.steps_used), (4, 1));
    let again = cmd_eval(&eval_args(ck.clone(), out.clone(), 1)).unwrap().0;
    assert_eq!(r1.returns, again.returns);
    let on_disk: serde_json::Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    assert_eq!(on_disk["mean_return"].as_f64().unwrap(), r1.mean_return);

    let mut with_csv = eval_args(ck, out.clone(), 4);
    with_csv.trace_csv = true;
    cmd_eval(&with_csv).unwrap();
    let csv = fs::read_to_string(out.join("eval_pendulum_steps4_n4_seed11.csv")).unwrap();
    assert!(csv.starts_with("episode,step,obs_0"));
    assert_eq!(csv.lines().count(), 1 + r4.lengths.iter().sum::<usize>());
}

#[test]
fn eval_refuses_bad_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let ck = trained_checkpoint(tmp.path());
    let bytes = fs::read(&ck).unwrap();

    let bad_magic = tmp.path().join("magic.trfp");
    let mut b = bytes.clone();
    b[0] = b'X';
    fs::write(&bad_magic, b).unwrap();
    let err = cmd_eval(&eval_args(bad_magic, tmp.path().join("e"), 4)).unwrap_err();
    assert!(format!("{err:#}").contains("magic"), "{err:#}");

    let bad_version = tmp.path().join("version.trfp");
    let mut b = bytes;
    b[4..8].copy_from_slice(&7u32.to_le_bytes());
    fs::write(&bad_version, b).unwrap();
    let err = cmd_eval(&eval_args(bad_version, tmp.path().join("e"), 4)).unwrap_err();
    assert!(format!("{err:#}").contains("version 7"), "{err:#}");

    let mut wrong_env = eval_args(ck, tmp.path().join("e"), 4);
    wrong_env.env = Some(EnvKind::Multigoal);
    assert!(cmd_eval(&wrong_env).is_err());
}

/// Pendulum agent whose policy velocity is `v = A u + c`.
fn stub_agent(a: &Array2<f64>, c: &[f64]) -> Agent {
    let env = EnvKind::Pendulum;
    let sd = env.build().obs_dim();
    let d = a.nrows();
    let mut w = Array2::zeros((sd + d + 1, d));
    w.slice_mut(ndarray::s![sd..sd + d, ..]).assign(&a.t());
    let velocity = MlpParams::from_layers(vec![(w, Array1::from(c.to_vec()))], Activation::Identity).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let sigma = MlpParams::new(&[sd + d + 1, 4, d], Activation::Mish, OutputInit::HeUniform, &mut rng);
    let policy = FlowPolicy::from_parts(velocity, sigma, (1e-3, 0.5), HybridSchedule::new(4, 1).unwrap()).unwrap();
    Agent {
        env,
        actor: Actor::Flow(policy),
        critic: CriticEnsemble::new(sd, d, &[8], 0.005, &mut rng).unwrap(),
        temperature: Temperature::new(0.2, -1.0).unwrap(),
    }
}

#[test]
fn diagnose_stub_fields() {
    let tmp = tempfile::tempdir().unwrap();
    let run = |name: &str, agent: Agent| {
        let ck = tmp.path().join(format!("{name}.trfp"));
        agent.save(&ck).unwrap();
        let out = tmp.path().join(name);
        let (r, path) = cmd_diagnose(&DiagnoseArgs {
            checkpoint: ck,
            samples: 16,
            seed: 0,
            outdir: out,
        })
        .unwrap();
        assert!(path.exists());
        r
    };
    let zero = run("zero", stub_agent(&Array2::zeros((1, 1)), &[0.0]));
    assert_eq!(zero.straightness.max, 0.0);
    assert_eq!(zero.max_abs_divergence.max, 0.0);
    assert_eq!(zero.abs_delta_pre.max, 0.0);
    assert!(zero.bound_holds);

    let constant = run("constant", stub_agent(&Array2::zeros((1, 1)), &[0.7]));
    assert!(constant.straightness.max < 1e-12);
    assert!(constant.max_abs_divergence.max < 1e-8);
    assert!(constant.abs_delta_pre.max < 1e-8);

    // 1-D linear field v = -0.8 u: delta_pre = 0.8 * 0.75
    let linear = run("linear", stub_agent(&Array2::from_elem((1, 1), -0.8), &[0.0]));
    assert!((linear.abs_delta_pre.mean - 0.6).abs() < 1e-3, "{}", linear.abs_delta_pre.mean);
    assert!(linear.bound_holds);
}

#[test]
fn ablations_reach_manifest_evaluation_and_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), |_| {});
    let run = |a: Ablation| {
        let out = tmp.path().join(a.as_str());
        let mut args = train_args(cfg.clone(), out.clone());
        args.ablate = Some(a);
        cmd_train(&args).unwrap();
        out
    };
    let out = run(Ablation::NoFm);
    let m = manifest(&out);
    assert_eq!(m["effective_config"]["lambda_fm"], 0.0);
    assert_eq!(m["effective_config"]["no_fm"], true);
    let metrics = fs::read_to_string(seed_dir(&out, 3).join("metrics.jsonl")).unwrap();
    assert!(metrics.lines().all(|l| l.contains("\"fm_loss\":null")));

    let out = run(Ablation::NoQguide);
    assert!(seed_dir(&out, 3).join("eval_steps4_n1.json").exists());
    assert!(!seed_dir(&out, 3).join("eval_steps4_n4.json").exists());

    let out = run(Ablation::NoTail);
    let metrics = fs::read_to_string(seed_dir(&out, 3).join("metrics.jsonl")).unwrap();
    for line in metrics.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        if v["phase"] == "train" {
            assert!((v["mean_sigma"].as_f64().unwrap() - 1e-3).abs() < 1e-12, "{line}");
        }
    }
}

#[test]
fn unknown_ablation_is_a_usage_error() {
    let out = bin()
        .args(["ablate", "--config", "x.cfg", "--ablate", "no_everything"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_everything"));
}
