//! Training orchestration: collect delayed episodes, run offline phases every
//! N plant ticks, evaluate periodically, write CSVs and checkpoints.

use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::agent::ActorCritic;
use crate::delayrt::{
    hanging_start, measure_inference_time, run_delayed_episode, AugmentedState, Controller,
    DelayConfig, DelayMode, DelayedEpisodeLog, DelayedLoop, HybridController, InferenceStats,
    MpcController, PolicyController,
};
use crate::error::{Error, Result};
use crate::harness::config::{DelayModeSetting, ExperimentConfig, Method};
use crate::harness::stats::{ci95_half_width, derive_seed, mean_std};
use crate::model::{DynamicsModel, ModelTrainer, ReplayBuffer, Transition};

const STREAM_TRAIN: u64 = 0x7261_696e;
const STREAM_EVAL: u64 = 0x6576_616c;
const STREAM_INIT: u64 = 0x696e_6974;

/// Start state and plant seed of evaluation episode `k`; identical across
/// evaluations of one run and disjoint from the training stream.
pub fn eval_episode_seed(seed: u64, k: usize) -> u64 {
    derive_seed(seed, STREAM_EVAL, k as u64)
}

fn train_episode_seed(seed: u64, k: usize) -> u64 {
    derive_seed(seed, STREAM_TRAIN, k as u64)
}

/// Summary of a batch of evaluation episodes.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub returns: Vec<f64>,
    pub mean_return: f64,
    pub ci_half_width: Option<f64>,
    pub successes: usize,
    /// Over successful episodes only; NaN when none succeeded.
    pub swing_up_mean: f64,
    pub swing_up_std: f64,
    pub rotor_deviation_mean: f64,
    pub rotor_deviation_std: f64,
    /// Over every decision taken.
    pub inference: InferenceStats,
    pub budget_violations: usize,
    pub gaps: usize,
}

impl Evaluation {
    pub fn from_logs(logs: &[DelayedEpisodeLog]) -> Self {
        let returns: Vec<f64> = logs.iter().map(|l| l.episode_return).collect();
        let ok: Vec<&DelayedEpisodeLog> = logs.iter().filter(|l| l.succeeded()).collect();
        let swing: Vec<f64> = ok.iter().map(|l| l.swing_up_time).collect();
        let rotor: Vec<f64> = ok.iter().map(|l| l.rotor_deviation).collect();
        let times: Vec<f64> = logs
            .iter()
            .flat_map(|l| l.records.iter())
            .filter(|r| r.inference_ms > 0.0)
            .map(|r| r.inference_ms)
            .collect();
        let (mean_return, _) = mean_std(&returns);
        let (swing_up_mean, swing_up_std) = mean_std(&swing);
        let (rotor_deviation_mean, rotor_deviation_std) = mean_std(&rotor);
        let (t_mean, t_std) = mean_std(&times);
        Self {
            ci_half_width: ci95_half_width(&returns),
            returns,
            mean_return,
            successes: ok.len(),
            swing_up_mean,
            swing_up_std,
            rotor_deviation_mean,
            rotor_deviation_std,
            inference: InferenceStats {
                mean_ms: if times.is_empty() { 0.0 } else { t_mean },
                std_ms: if times.is_empty() { 0.0 } else { t_std },
                trials: times.len(),
            },
            budget_violations: logs.iter().map(|l| l.budget_violations).sum(),
            gaps: logs.iter().map(|l| l.gaps).sum(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurveRow {
    pub step: usize,
    pub eval: Evaluation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub method: Method,
    /// Plant ticks consumed.
    pub steps: usize,
    pub curve: Vec<CurveRow>,
    pub stopped_early: bool,
    /// Diagnostic message when training aborted on divergence.
    pub aborted: Option<String>,
    pub files: Vec<PathBuf>,
}

impl RunReport {
    pub fn final_eval(&self) -> Option<&Evaluation> {
        self.curve.last().map(|r| &r.eval)
    }

    /// Best evaluation by success count, earliest on ties.
    pub fn best_eval(&self) -> Option<&CurveRow> {
        self.curve
            .iter()
            .fold(None, |best: Option<&CurveRow>, r| match best {
                Some(b) if b.eval.successes >= r.eval.successes => Some(b),
                _ => Some(r),
            })
    }
}

/// A trained (or training) controller stack viewed through one config.
#[derive(Clone, Copy)]
pub struct Policy<'a> {
    pub cfg: &'a ExperimentConfig,
    pub model: Option<&'a DynamicsModel>,
    pub agent: Option<&'a ActorCritic>,
}

/// Uniform random voltage held for the whole plan.
fn random_controller(a_max: f64, len: usize) -> impl FnMut(&AugmentedState, &[f64], u64) -> Result<Vec<f64>> {
    move |_, _, seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rng.gen_range(-a_max..=a_max);
        Ok(vec![a; len.max(1)])
    }
}

impl<'a> Policy<'a> {
    /// Controller for this method; `explore` adds collection noise.
    pub fn controller(&self, explore: bool) -> Result<Box<dyn Controller + 'a>> {
        let cfg = self.cfg;
        let missing = |what: &str| Error::Checkpoint(format!("{} needs {what}", cfg.method));
        let noise = if explore { cfg.train.action_noise } else { 0.0 };
        Ok(match cfg.method {
            Method::RtHcp => Box::new(HybridController {
                model: self.model.ok_or_else(|| missing("a dynamics model"))?,
                agent: self.agent.ok_or_else(|| missing("an actor-critic"))?,
                cem: cfg.planner_config()?,
                action_noise: noise,
            }),
            Method::RtMpcBaseline => Box::new(MpcController {
                model: self.model.ok_or_else(|| missing("a dynamics model"))?,
                cem: cfg.planner_config()?,
                action_noise: noise,
            }),
            Method::Td3 => {
                let agent = self.agent.ok_or_else(|| missing("an actor-critic"))?;
                Box::new(PolicyController {
                    agent,
                    model: None,
                    exploration_std: if explore { agent.cfg.exploration_std } else { 0.0 },
                })
            }
        })
    }

    /// Wall-clock cost of one decision for this method.
    pub fn measure_inference(&self, trials: usize) -> Result<InferenceStats> {
        let mut c = self.controller(false)?;
        let delay = self.cfg.delay.steps;
        Ok(measure_inference_time(c.as_mut(), delay, trials, self.cfg.seed))
    }

    /// Delay protocol this policy runs under. Measured mode with a derived
    /// H_e times the controller first.
    pub fn delay_config(&self) -> Result<DelayConfig> {
        let cfg = self.cfg;
        let inference_ms = match cfg.delay.mode {
            DelayModeSetting::Fixed => cfg.delay.steps as f64 * cfg.plant.dt * 1e3,
            DelayModeSetting::Measured if cfg.delay.horizon_e == 0 => {
                self.measure_inference(cfg.bench_trials)?.mean_ms
            }
            DelayModeSetting::Measured => 0.0,
        };
        cfg.delay_config(inference_ms)
    }

    /// Deterministic episodes from the evaluation seed stream with exploration off.
    pub fn evaluate_logs(&self, delay: &DelayConfig, episodes: usize) -> Result<Vec<DelayedEpisodeLog>> {
        let mut c = self.controller(false)?;
        (0..episodes)
            .map(|k| {
                let s = eval_episode_seed(self.cfg.seed, k);
                run_delayed_episode(
                    &self.cfg.plant,
                    c.as_mut(),
                    delay,
                    hanging_start(s),
                    self.cfg.train.episode_steps,
                    s,
                )
            })
            .collect()
    }

    pub fn evaluate(&self, delay: &DelayConfig, episodes: usize) -> Result<(Evaluation, Vec<DelayedEpisodeLog>)> {
        let logs = self.evaluate_logs(delay, episodes)?;
        Ok((Evaluation::from_logs(&logs), logs))
    }
}

/// Model, agent and replay buffers of one training run.
pub struct Learner {
    pub cfg: ExperimentConfig,
    pub model: Option<DynamicsModel>,
    pub agent: Option<ActorCritic>,
    pub real: ReplayBuffer,
    pub imagined: ReplayBuffer,
    trainer: Option<ModelTrainer>,
    normalized_at: usize,
    pub offline_phases: usize,
}

impl Learner {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let seed = |k| derive_seed(cfg.seed, STREAM_INIT, k);
        let model = if cfg.method.uses_model() {
            Some(DynamicsModel::new(
                cfg.model_kind(),
                cfg.prior(),
                cfg.plant.dt,
                cfg.model.prior_substeps,
                seed(1),
            )?)
        } else {
            None
        };
        let agent = if cfg.method.uses_agent() {
            Some(ActorCritic::new(cfg.agent.clone(), cfg.plant.params.a_max, seed(2))?)
        } else {
            None
        };
        let trainer = model
            .as_ref()
            .map(|m| ModelTrainer::new(m, cfg.model.lr, cfg.model.batch_size, cfg.model.max_batches, seed(5)));
        Ok(Self {
            real: ReplayBuffer::new(cfg.train.replay_capacity, seed(3)),
            imagined: ReplayBuffer::new(cfg.train.imagined_capacity, seed(4)),
            cfg,
            model,
            agent,
            trainer,
            normalized_at: 0,
            offline_phases: 0,
        })
    }

    pub fn policy(&self) -> Policy<'_> {
        Policy {
            cfg: &self.cfg,
            model: self.model.as_ref(),
            agent: self.agent.as_ref(),
        }
    }

    /// Model fitting, agent updates, imagination, more agent updates.
    pub fn offline_phase(&mut self) -> Result<()> {
        let t = self.cfg.train.clone();
        if let (Some(model), Some(trainer)) = (self.model.as_mut(), self.trainer.as_mut()) {
            if self.real.len() >= trainer.batch_size {
                // Normalization is refit whenever the data has doubled.
                if self.normalized_at == 0 || self.real.len() >= 2 * self.normalized_at {
                    model.fit_normalizer(&self.real);
                    self.normalized_at = self.real.len();
                }
                for _ in 0..self.cfg.model.epochs {
                    model.train_epoch(&self.real, trainer)?;
                }
            }
        }
        if let Some(agent) = self.agent.as_mut() {
            if !self.real.is_empty() {
                agent_updates(agent, &mut self.real, &mut self.imagined, t.updates_before)?;
                if let Some(model) = self.model.as_ref() {
                    let std = agent.cfg.exploration_std;
                    agent.imagine(
                        model,
                        &mut self.real,
                        &mut self.imagined,
                        t.imagination_rollouts,
                        t.imagination_horizon,
                        std,
                    )?;
                }
                agent_updates(agent, &mut self.real, &mut self.imagined, t.updates_after)?;
            }
        }
        self.offline_phases += 1;
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let mut out = Vec::new();
        let mut write = |name: &str, text: String| -> Result<()> {
            let p = dir.join(name);
            fs::write(&p, text)?;
            out.push(p);
            Ok(())
        };
        write("config.txt", self.cfg.to_text())?;
        if let Some(m) = &self.model {
            write("model.txt", m.to_checkpoint())?;
        }
        if let Some(a) = &self.agent {
            write("agent.txt", a.to_checkpoint())?;
        }
        Ok(out)
    }

    /// Restores networks from `dir`; buffers start empty.
    pub fn load(cfg: ExperimentConfig, dir: &Path) -> Result<Self> {
        let mut l = Self::new(cfg)?;
        let read = |name: &str| {
            let p = dir.join(name);
            fs::read_to_string(&p).map_err(|e| Error::Checkpoint(format!("{}: {e}", p.display())))
        };
        if l.model.is_some() {
            let m = DynamicsModel::from_checkpoint(&read("model.txt")?)?;
            if m.kind() != l.cfg.model_kind() {
                return Err(Error::Mismatch(format!(
                    "checkpoint holds a {} model, config asks for {}",
                    m.kind().tag(),
                    l.cfg.model_kind().tag()
                )));
            }
            l.model = Some(m);
        }
        if l.agent.is_some() {
            let seed = derive_seed(l.cfg.seed, STREAM_INIT, 2);
            l.agent = Some(ActorCritic::from_checkpoint(&read("agent.txt")?, seed)?);
        }
        Ok(l)
    }
}

/// TD3 updates on half real, half imagined minibatches (all real while the
/// imagined buffer is empty).
fn agent_updates(
    agent: &mut ActorCritic,
    real: &mut ReplayBuffer,
    imagined: &mut ReplayBuffer,
    n: usize,
) -> Result<()> {
    let bs = agent.cfg.batch_size;
    for _ in 0..n {
        let batch: Vec<Transition> = if imagined.is_empty() {
            real.sample(bs)
        } else {
            let half = bs / 2;
            let mut b = real.sample(bs - half);
            b.extend(imagined.sample(half));
            b
        };
        agent.update(&batch)?;
    }
    Ok(())
}

fn is_divergence(e: &Error) -> bool {
    matches!(e, Error::Divergence(_) | Error::NonFinite(_))
}

pub fn write_learning_curve(path: &Path, curve: &[CurveRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "step",
        "mean_return",
        "ci95_half_width",
        "successes",
        "episodes",
        "swing_up_mean_s",
        "swing_up_std_s",
        "rotor_dev_mean_rad",
        "rotor_dev_std_rad",
    ])?;
    let opt = |x: f64| if x.is_finite() { x.to_string() } else { String::new() };
    for r in curve {
        let e = &r.eval;
        w.write_record(&[
            r.step.to_string(),
            e.mean_return.to_string(),
            e.ci_half_width.map(|h| h.to_string()).unwrap_or_default(),
            e.successes.to_string(),
            e.returns.len().to_string(),
            opt(e.swing_up_mean),
            opt(e.swing_up_std),
            opt(e.rotor_deviation_mean),
            opt(e.rotor_deviation_std),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Runs the full training loop, writing outputs under `out` when given.
///
/// Divergence inside training ends the run early with `aborted` set; the
/// report still holds everything gathered up to that point.
pub fn train(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<(RunReport, Learner)> {
    let mut learner = Learner::new(cfg.clone())?;
    let delay = learner.policy().delay_config()?;
    let mut report = RunReport {
        method: cfg.method,
        steps: 0,
        curve: Vec::new(),
        stopped_early: false,
        aborted: None,
        files: Vec::new(),
    };
    if let Some(dir) = out {
        fs::create_dir_all(dir.join("episodes"))?;
    }
    info!(
        "training {} for {} ticks (H_p={}, H_e={}, delay={})",
        cfg.method,
        cfg.train.budget,
        delay.horizon_p,
        delay.horizon_e,
        delay.delay_steps()
    );
    if let Err(e) = train_loop(&mut learner, &delay, out, &mut report) {
        if !is_divergence(&e) {
            return Err(e);
        }
        warn!("aborting at tick {}: {e}", report.steps);
        report.aborted = Some(format!("tick {}: {e}", report.steps));
    }
    if let Some(dir) = out {
        let curve_path = dir.join("learning_curve.csv");
        write_learning_curve(&curve_path, &report.curve)?;
        report.files.push(curve_path);
        report.files.extend(learner.save(&dir.join("ckpt"))?);
    }
    Ok((report, learner))
}

fn train_loop(
    learner: &mut Learner,
    delay: &DelayConfig,
    out: Option<&Path>,
    report: &mut RunReport,
) -> Result<()> {
    let cfg = learner.cfg.clone();
    let t = &cfg.train;
    let a_max = cfg.plant.params.a_max;
    let mut episode = 0usize;
    let mut lp: Option<DelayedLoop> = None;
    let mut last_eval = 0usize;
    while report.steps < t.budget {
        let needs_reset = lp
            .as_ref()
            .is_none_or(|l| l.is_done() || l.tick() >= t.episode_steps);
        if needs_reset {
            let s = train_episode_seed(cfg.seed, episode);
            lp = Some(DelayedLoop::new(cfg.plant, *delay, hanging_start(s), s)?);
            episode += 1;
        }
        let l = lp.as_mut().expect("episode started");
        let record = if report.steps < t.warmup_steps || learner.offline_phases == 0 {
            let mut c = random_controller(a_max, delay.horizon_p);
            l.step(&mut c)?
        } else {
            let mut c = learner.policy().controller(true)?;
            l.step(c.as_mut())?
        };
        learner.real.push(record.transition());
        report.steps += 1;

        if report.steps.is_multiple_of(t.offline_period) {
            learner.offline_phase()?;
        }
        if report.steps.is_multiple_of(t.eval_every) || report.steps == t.budget {
            last_eval = report.steps;
            if evaluate_and_record(learner, delay, out, report)? {
                report.stopped_early = true;
                return Ok(());
            }
        }
    }
    if report.steps > last_eval {
        evaluate_and_record(learner, delay, out, report)?;
    }
    Ok(())
}

/// Returns true when the early-stopping target was reached.
fn evaluate_and_record(
    learner: &Learner,
    delay: &DelayConfig,
    out: Option<&Path>,
    report: &mut RunReport,
) -> Result<bool> {
    let cfg = &learner.cfg;
    if learner.offline_phases == 0 {
        return Ok(false);
    }
    let (eval, logs) = learner.policy().evaluate(delay, cfg.train.eval_episodes)?;
    info!(
        "tick {:>7}: return {:8.2} ± {:6.2}, swing-ups {}/{}",
        report.steps,
        eval.mean_return,
        eval.ci_half_width.unwrap_or(0.0),
        eval.successes,
        logs.len()
    );
    let target = cfg.train.early_stop_successes;
    let done = target > 0 && eval.successes >= target;
    report.curve.push(CurveRow {
        step: report.steps,
        eval,
    });
    if let Some(dir) = out {
        for (k, log) in logs.iter().enumerate() {
            log.write_csv(&dir.join("episodes").join(format!("eval_{k:02}.csv")))?;
        }
        write_learning_curve(&dir.join("learning_curve.csv"), &report.curve)?;
        learner.save(&dir.join("ckpt"))?;
    }
    Ok(done)
}

/// Delay settings used for fixed-mode replays of `cfg`.
pub fn fixed_delay(cfg: &ExperimentConfig, steps: usize, horizon_e: usize) -> Result<DelayConfig> {
    let d = DelayConfig {
        dt: cfg.plant.dt,
        horizon_p: cfg.horizon_p().max(horizon_e),
        horizon_e,
        mode: DelayMode::Fixed(steps),
        budget_check: false,
    };
    d.validate()?;
    Ok(d)
}
