use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;

use rthcp::delayrt::read_episode_csv;
use rthcp::harness::experiments::{
    ablate_horizon, bench_inference, excitation_episode, predict_rollout, write_ablation_csv,
    write_bench_csv, write_prediction_csv, Trajectory,
};
use rthcp::harness::stats::derive_seed;
use rthcp::harness::train::{train, write_learning_curve, CurveRow, Learner};
use rthcp::harness::{ExperimentConfig, Method};
use rthcp::model::{DynamicsModel, ModelKind};
use rthcp::Error;

#[derive(Parser)]
#[command(name = "rthcp", about = "Delay-aware hybrid planning on a simulated rotary pendulum")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Config file (flat key = value).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// rt-hcp, rt-mpc-baseline or td3.
    #[arg(long, global = true)]
    method: Option<String>,
    /// Training budget in plant ticks (train) or prediction horizon (predict-rollout).
    #[arg(long, global = true)]
    steps: Option<usize>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Train a method and write learning_curve.csv, episodes/ and ckpt/.
    Train,
    /// Evaluate the checkpoint in <out>/ckpt.
    Eval,
    /// Return versus planning horizon, written to ablation.csv.
    AblateHorizon,
    /// Multi-step model predictions against a logged episode.
    PredictRollout,
    /// Decision-time benchmark of every method, written to bench.csv.
    BenchInference,
}

fn config_error(msg: String) -> Error {
    Error::Config { line: 0, msg }
}

fn load_config(cli: &Cli, fallback: Option<&Path>) -> rthcp::Result<ExperimentConfig> {
    let mut cfg = match (&cli.config, fallback) {
        (Some(p), _) => ExperimentConfig::load(p)?,
        (None, Some(p)) if p.exists() => ExperimentConfig::load(p)?,
        _ => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(m) = &cli.method {
        cfg.method = m.parse::<Method>().map_err(config_error)?;
    }
    if let (Some(n), Command::Train) = (cli.steps, cli.command) {
        cfg.train.budget = n;
    }
    if let (Some(n), Command::PredictRollout) = (cli.steps, cli.command) {
        cfg.predict_horizon = n;
    }
    cfg.validate().map_err(|e| match e {
        Error::Config { .. } => e,
        other => config_error(other.to_string()),
    })?;
    Ok(cfg)
}

fn run(cli: &Cli) -> rthcp::Result<ExitCode> {
    let out = &cli.out;
    let ckpt = out.join("ckpt");
    match cli.command {
        Command::Train => {
            let cfg = load_config(cli, None)?;
            let (report, _) = train(&cfg, Some(out))?;
            match report.final_eval() {
                Some(e) => println!(
                    "{}: {} ticks, return {:.2}, swing-ups {}/{}, swing-up time {:.2} s",
                    cfg.method,
                    report.steps,
                    e.mean_return,
                    e.successes,
                    e.returns.len(),
                    e.swing_up_mean
                ),
                None => println!("{}: {} ticks, no evaluation", cfg.method, report.steps),
            }
            if let Some(msg) = report.aborted {
                eprintln!("training diverged: {msg}");
                return Ok(ExitCode::from(3));
            }
        }
        Command::Eval => {
            let cfg = load_config(cli, Some(&ckpt.join("config.txt")))?;
            let learner = Learner::load(cfg.clone(), &ckpt)?;
            let policy = learner.policy();
            let delay = policy.delay_config()?;
            let (eval, logs) = policy.evaluate(&delay, cfg.train.eval_episodes)?;
            fs::create_dir_all(out.join("episodes"))?;
            for (k, log) in logs.iter().enumerate() {
                log.write_csv(&out.join("episodes").join(format!("eval_{k:02}.csv")))?;
            }
            write_learning_curve(&out.join("eval.csv"), &[CurveRow { step: 0, eval: eval.clone() }])?;
            println!(
                "return {:.2} ± {:.2}, swing-ups {}/{}, swing-up time {:.2} ± {:.2} s, rotor deviation {:.3} rad, T_i {:.2} ms",
                eval.mean_return,
                eval.ci_half_width.unwrap_or(0.0),
                eval.successes,
                logs.len(),
                eval.swing_up_mean,
                eval.swing_up_std,
                eval.rotor_deviation_mean,
                eval.inference.mean_ms
            );
        }
        Command::AblateHorizon => {
            let cfg = load_config(cli, Some(&ckpt.join("config.txt")))?;
            let learner = Learner::load(cfg.clone(), &ckpt)?;
            let rows = ablate_horizon(
                &cfg,
                learner.model.as_ref(),
                learner.agent.as_ref(),
                &cfg.ablation.horizons,
                cfg.ablation.trials,
            )?;
            fs::create_dir_all(out)?;
            write_ablation_csv(&out.join("ablation.csv"), &rows)?;
            for r in &rows {
                println!("H_p={:>3} H_e={:>2} return {:.2}", r.horizon, r.horizon_e, r.mean_return);
            }
        }
        Command::PredictRollout => {
            let cfg = load_config(cli, Some(&ckpt.join("config.txt")))?;
            fs::create_dir_all(out.join("episodes"))?;
            let traj = if cfg.predict_episode.is_empty() {
                let steps = cfg.train.episode_steps.max(cfg.predict_horizon);
                let tr = excitation_episode(&cfg.plant, steps, derive_seed(cfg.seed, 0x686f_6c64, 0))?;
                write_trajectory(&out.join("episodes").join("heldout.csv"), &tr, cfg.plant.dt)?;
                tr
            } else {
                Trajectory::from_rows(&read_episode_csv(Path::new(&cfg.predict_episode))?)
            };
            let prior = DynamicsModel::zero(
                ModelKind::ResidualPhysics,
                cfg.prior(),
                cfg.plant.dt,
                cfg.model.prior_substeps,
            );
            let mut models: Vec<(String, DynamicsModel)> = vec![("prior".into(), prior)];
            if ckpt.is_dir() {
                let mut files: Vec<PathBuf> = fs::read_dir(&ckpt)?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| {
                        p.file_name()
                            .and_then(|n| n.to_str())
                            .is_some_and(|n| n.starts_with("model") && n.ends_with(".txt"))
                    })
                    .collect();
                files.sort();
                for p in files {
                    let m = DynamicsModel::from_checkpoint(&fs::read_to_string(&p)?)?;
                    models.push((m.kind().tag().to_string(), m));
                }
            }
            let refs: Vec<(&str, &DynamicsModel)> = models.iter().map(|(n, m)| (n.as_str(), m)).collect();
            let table = predict_rollout(&refs, &traj, cfg.predict_horizon)?;
            write_prediction_csv(&out.join("prediction.csv"), &table, cfg.plant.dt)?;
            for (k, n) in table.names.iter().enumerate() {
                println!("{n}: mean state error {:.4}", table.mean_error(k));
            }
        }
        Command::BenchInference => {
            let cfg = load_config(cli, None)?;
            let rows = bench_inference(&cfg)?;
            fs::create_dir_all(out)?;
            write_bench_csv(&out.join("bench.csv"), &rows)?;
            for r in &rows {
                println!(
                    "{:<16} H_p={:>2} T_i={:8.3} ± {:6.3} ms  H_e_min={}",
                    r.method.tag(),
                    r.horizon_p,
                    r.stats.mean_ms,
                    r.stats.std_ms,
                    r.horizon_e_min
                );
            }
        }
    }
    info!("outputs in {}", out.display());
    Ok(ExitCode::SUCCESS)
}

fn write_trajectory(path: &Path, tr: &Trajectory, dt: f64) -> rthcp::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["t_ms", "alpha", "beta", "alpha_dot", "beta_dot", "action_V"])?;
    for (k, (s, a)) in tr.states.iter().zip(&tr.actions).enumerate() {
        w.write_record(&[
            (k as f64 * dt * 1e3).to_string(),
            s.alpha.to_string(),
            s.beta.to_string(),
            s.alpha_dot.to_string(),
            s.beta_dot.to_string(),
            a.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config { .. } => ExitCode::from(2),
                Error::Divergence(_) | Error::NonFinite(_) => ExitCode::from(3),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
