//! Flat `key = value` experiment configuration.
//!
//! One setting per line, `#` starts a comment, keys use dotted section
//! prefixes (`plant.dt_ms = 20`). Unknown keys and malformed values are
//! errors that carry the line number. Every key has a default, so an empty
//! file is a valid configuration. [`ExperimentConfig::to_text`] writes every
//! key and parses back to an equal value.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::agent::Td3Config;
use crate::delayrt::{DelayConfig, DelayMode};
use crate::error::{Error, Result};
use crate::model::ModelKind;
use crate::parallel::Execution;
use crate::pendulum::{PhysicalParams, PlantConfig};
use crate::planner::CemConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Hybrid CEM planning with a residual model and a TD3 agent.
    RtHcp,
    /// Plain CEM-MPC on a data-driven model.
    RtMpcBaseline,
    /// Model-free TD3 acting on the current state.
    Td3,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::RtHcp, Method::RtMpcBaseline, Method::Td3];

    pub fn tag(self) -> &'static str {
        match self {
            Method::RtHcp => "rt-hcp",
            Method::RtMpcBaseline => "rt-mpc-baseline",
            Method::Td3 => "td3",
        }
    }

    pub fn uses_model(self) -> bool {
        !matches!(self, Method::Td3)
    }

    pub fn uses_agent(self) -> bool {
        !matches!(self, Method::RtMpcBaseline)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Method::ALL
            .into_iter()
            .find(|m| m.tag() == s)
            .ok_or_else(|| format!("unknown method '{s}' (expected rt-hcp, rt-mpc-baseline or td3)"))
    }
}

/// Which dynamics model a model-based method learns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelChoice {
    /// Residual for rt-hcp, data-driven for the baseline.
    Auto,
    Fixed(ModelKind),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DelayModeSetting {
    Fixed,
    Measured,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DelaySettings {
    pub mode: DelayModeSetting,
    /// Simulated inference delay in ticks (fixed mode).
    pub steps: usize,
    /// Execution horizon; 0 derives it from the (simulated or measured)
    /// inference time via `min_execution_horizon`.
    pub horizon_e: usize,
    pub budget_check: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSettings {
    pub kind: ModelChoice,
    pub lr: f64,
    pub batch_size: usize,
    /// Cap on minibatches per epoch.
    pub max_batches: usize,
    pub epochs: usize,
    pub prior_substeps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    /// Plant ticks; offline phases do not count.
    pub budget: usize,
    /// Plant ticks between offline phases (N).
    pub offline_period: usize,
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub episode_steps: usize,
    /// Initial ticks driven by random held actions.
    pub warmup_steps: usize,
    pub updates_before: usize,
    pub updates_after: usize,
    pub imagination_rollouts: usize,
    pub imagination_horizon: usize,
    /// Gaussian noise on planned actions during collection, V.
    pub action_noise: f64,
    pub replay_capacity: usize,
    pub imagined_capacity: usize,
    /// Stop once an evaluation reaches this many successes; 0 disables.
    pub early_stop_successes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationSettings {
    pub horizons: Vec<usize>,
    pub trials: usize,
    /// Fixed-mode inference cost per planned step, ms.
    pub ms_per_step: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub method: Method,
    pub seed: u64,
    pub plant: PlantConfig,
    pub delay: DelaySettings,
    pub cem: CemConfig,
    /// Planning horizon of the CEM-MPC baseline.
    pub baseline_horizon: usize,
    pub agent: Td3Config,
    pub model: ModelSettings,
    pub train: TrainSettings,
    pub ablation: AblationSettings,
    pub predict_horizon: usize,
    /// Episode CSV to replay in `predict-rollout`; empty generates one.
    pub predict_episode: String,
    pub bench_trials: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let plant = PlantConfig::default();
        let a_max = plant.params.a_max;
        Self {
            method: Method::RtHcp,
            seed: 0,
            plant,
            delay: DelaySettings {
                mode: DelayModeSetting::Fixed,
                steps: 2,
                horizon_e: 2,
                budget_check: false,
            },
            cem: CemConfig::hybrid(a_max),
            baseline_horizon: 15,
            agent: Td3Config::for_voltage_limit(a_max),
            model: ModelSettings {
                kind: ModelChoice::Auto,
                lr: 1e-3,
                batch_size: 256,
                max_batches: 100,
                epochs: 5,
                prior_substeps: 4,
            },
            train: TrainSettings {
                budget: 200_000,
                offline_period: 500,
                eval_every: 10_000,
                eval_episodes: 10,
                episode_steps: 500,
                warmup_steps: 500,
                updates_before: 200,
                updates_after: 200,
                imagination_rollouts: 64,
                imagination_horizon: 10,
                action_noise: 0.1 * a_max,
                replay_capacity: 200_000,
                imagined_capacity: 100_000,
                early_stop_successes: 8,
            },
            ablation: AblationSettings {
                horizons: vec![5, 20],
                trials: 10,
                ms_per_step: 7.2,
            },
            predict_horizon: 50,
            predict_episode: String::new(),
            bench_trials: 20,
        }
    }
}

fn parse<T: FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse::<T>().map_err(|_| format!("cannot parse '{v}'"))
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("expected true or false, got '{v}'")),
    }
}

fn parse_list(v: &str) -> std::result::Result<Vec<usize>, String> {
    v.split(',')
        .map(|x| x.trim())
        .filter(|x| !x.is_empty())
        .map(parse::<usize>)
        .collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn execution_tag(e: Execution) -> &'static str {
    match e {
        Execution::Auto => "auto",
        Execution::Sequential => "sequential",
        Execution::Parallel => "parallel",
    }
}

impl ExperimentConfig {
    /// Every key with its current value, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let p = &self.plant.params;
        let c = &self.cem;
        let a = &self.agent;
        let m = &self.model;
        let t = &self.train;
        vec![
            ("method", self.method.to_string()),
            ("seed", self.seed.to_string()),
            ("plant.m_p", p.m_p.to_string()),
            ("plant.l_p", p.l_p.to_string()),
            ("plant.l_r", p.l_r.to_string()),
            ("plant.j1", p.j1.to_string()),
            ("plant.j2", p.j2.to_string()),
            ("plant.k_t", p.k_t.to_string()),
            ("plant.k_m", p.k_m.to_string()),
            ("plant.r_m", p.r_m.to_string()),
            ("plant.g", p.g.to_string()),
            ("plant.a_max", p.a_max.to_string()),
            ("plant.dt_ms", (self.plant.dt * 1e3).to_string()),
            ("plant.b_r", self.plant.b_r.to_string()),
            ("plant.b_p", self.plant.b_p.to_string()),
            ("plant.dead_zone", self.plant.dead_zone.to_string()),
            ("plant.torque_noise_std", self.plant.torque_noise_std.to_string()),
            ("plant.substeps", self.plant.integrator_substeps.to_string()),
            (
                "delay.mode",
                match self.delay.mode {
                    DelayModeSetting::Fixed => "fixed".into(),
                    DelayModeSetting::Measured => "measured".into(),
                },
            ),
            ("delay.steps", self.delay.steps.to_string()),
            ("delay.horizon_e", self.delay.horizon_e.to_string()),
            ("delay.budget_check", self.delay.budget_check.to_string()),
            ("cem.iterations", c.iterations.to_string()),
            ("cem.population", c.population.to_string()),
            ("cem.policy_candidates", c.policy_candidates.to_string()),
            ("cem.elite_count", c.elite_count.to_string()),
            ("cem.horizon", c.horizon.to_string()),
            ("cem.init_std", c.init_std.to_string()),
            ("cem.min_std", c.min_std.to_string()),
            ("cem.gamma", c.gamma.to_string()),
            ("cem.use_terminal_q", c.use_terminal_q.to_string()),
            ("cem.candidate_noise", c.candidate_noise.to_string()),
            ("cem.terminal_penalty", c.terminal_penalty.to_string()),
            ("cem.execution", execution_tag(c.execution).into()),
            ("baseline.horizon", self.baseline_horizon.to_string()),
            ("agent.gamma", a.gamma.to_string()),
            ("agent.tau", a.tau.to_string()),
            ("agent.policy_noise", a.policy_noise.to_string()),
            ("agent.noise_clip", a.noise_clip.to_string()),
            ("agent.policy_delay", a.policy_delay.to_string()),
            ("agent.exploration_std", a.exploration_std.to_string()),
            ("agent.hidden", join(&a.hidden)),
            ("agent.lr_actor", a.lr_actor.to_string()),
            ("agent.lr_critic", a.lr_critic.to_string()),
            ("agent.batch_size", a.batch_size.to_string()),
            (
                "model.kind",
                match m.kind {
                    ModelChoice::Auto => "auto".into(),
                    ModelChoice::Fixed(k) => k.tag().into(),
                },
            ),
            ("model.lr", m.lr.to_string()),
            ("model.batch_size", m.batch_size.to_string()),
            ("model.max_batches", m.max_batches.to_string()),
            ("model.epochs", m.epochs.to_string()),
            ("model.prior_substeps", m.prior_substeps.to_string()),
            ("train.budget", t.budget.to_string()),
            ("train.offline_period", t.offline_period.to_string()),
            ("train.eval_every", t.eval_every.to_string()),
            ("train.eval_episodes", t.eval_episodes.to_string()),
            ("train.episode_steps", t.episode_steps.to_string()),
            ("train.warmup_steps", t.warmup_steps.to_string()),
            ("train.updates_before", t.updates_before.to_string()),
            ("train.updates_after", t.updates_after.to_string()),
            ("train.imagination_rollouts", t.imagination_rollouts.to_string()),
            ("train.imagination_horizon", t.imagination_horizon.to_string()),
            ("train.action_noise", t.action_noise.to_string()),
            ("train.replay_capacity", t.replay_capacity.to_string()),
            ("train.imagined_capacity", t.imagined_capacity.to_string()),
            ("train.early_stop_successes", t.early_stop_successes.to_string()),
            ("ablation.horizons", join(&self.ablation.horizons)),
            ("ablation.trials", self.ablation.trials.to_string()),
            ("ablation.ms_per_step", self.ablation.ms_per_step.to_string()),
            ("predict.horizon", self.predict_horizon.to_string()),
            ("predict.episode", self.predict_episode.clone()),
            ("bench.trials", self.bench_trials.to_string()),
        ]
    }

    /// Assigns one key. The error message does not include the line.
    pub fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let p = &mut self.plant.params;
        let c = &mut self.cem;
        let a = &mut self.agent;
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "method" => self.method = v.parse()?,
            "seed" => self.seed = parse(v)?,
            "plant.m_p" => p.m_p = parse(v)?,
            "plant.l_p" => p.l_p = parse(v)?,
            "plant.l_r" => p.l_r = parse(v)?,
            "plant.j1" => p.j1 = parse(v)?,
            "plant.j2" => p.j2 = parse(v)?,
            "plant.k_t" => p.k_t = parse(v)?,
            "plant.k_m" => p.k_m = parse(v)?,
            "plant.r_m" => p.r_m = parse(v)?,
            "plant.g" => p.g = parse(v)?,
            "plant.a_max" => p.a_max = parse(v)?,
            "plant.dt_ms" => self.plant.dt = parse::<f64>(v)? / 1e3,
            "plant.b_r" => self.plant.b_r = parse(v)?,
            "plant.b_p" => self.plant.b_p = parse(v)?,
            "plant.dead_zone" => self.plant.dead_zone = parse(v)?,
            "plant.torque_noise_std" => self.plant.torque_noise_std = parse(v)?,
            "plant.substeps" => self.plant.integrator_substeps = parse(v)?,
            "delay.mode" => {
                self.delay.mode = match v {
                    "fixed" => DelayModeSetting::Fixed,
                    "measured" => DelayModeSetting::Measured,
                    _ => return Err(format!("expected fixed or measured, got '{v}'")),
                }
            }
            "delay.steps" => self.delay.steps = parse(v)?,
            "delay.horizon_e" => self.delay.horizon_e = parse(v)?,
            "delay.budget_check" => self.delay.budget_check = parse_bool(v)?,
            "cem.iterations" => c.iterations = parse(v)?,
            "cem.population" => c.population = parse(v)?,
            "cem.policy_candidates" => c.policy_candidates = parse(v)?,
            "cem.elite_count" => c.elite_count = parse(v)?,
            "cem.horizon" => c.horizon = parse(v)?,
            "cem.init_std" => c.init_std = parse(v)?,
            "cem.min_std" => c.min_std = parse(v)?,
            "cem.gamma" => c.gamma = parse(v)?,
            "cem.use_terminal_q" => c.use_terminal_q = parse_bool(v)?,
            "cem.candidate_noise" => c.candidate_noise = parse(v)?,
            "cem.terminal_penalty" => c.terminal_penalty = parse(v)?,
            "cem.execution" => {
                c.execution = match v {
                    "auto" => Execution::Auto,
                    "sequential" => Execution::Sequential,
                    "parallel" => Execution::Parallel,
                    _ => return Err(format!("expected auto, sequential or parallel, got '{v}'")),
                }
            }
            "baseline.horizon" => self.baseline_horizon = parse(v)?,
            "agent.gamma" => a.gamma = parse(v)?,
            "agent.tau" => a.tau = parse(v)?,
            "agent.policy_noise" => a.policy_noise = parse(v)?,
            "agent.noise_clip" => a.noise_clip = parse(v)?,
            "agent.policy_delay" => a.policy_delay = parse(v)?,
            "agent.exploration_std" => a.exploration_std = parse(v)?,
            "agent.hidden" => a.hidden = parse_list(v)?,
            "agent.lr_actor" => a.lr_actor = parse(v)?,
            "agent.lr_critic" => a.lr_critic = parse(v)?,
            "agent.batch_size" => a.batch_size = parse(v)?,
            "model.kind" => {
                m.kind = match v {
                    "auto" => ModelChoice::Auto,
                    _ => ModelChoice::Fixed(
                        ModelKind::from_tag(v)
                            .ok_or_else(|| format!("expected auto, residual or data-driven, got '{v}'"))?,
                    ),
                }
            }
            "model.lr" => m.lr = parse(v)?,
            "model.batch_size" => m.batch_size = parse(v)?,
            "model.max_batches" => m.max_batches = parse(v)?,
            "model.epochs" => m.epochs = parse(v)?,
            "model.prior_substeps" => m.prior_substeps = parse(v)?,
            "train.budget" => t.budget = parse(v)?,
            "train.offline_period" => t.offline_period = parse(v)?,
            "train.eval_every" => t.eval_every = parse(v)?,
            "train.eval_episodes" => t.eval_episodes = parse(v)?,
            "train.episode_steps" => t.episode_steps = parse(v)?,
            "train.warmup_steps" => t.warmup_steps = parse(v)?,
            "train.updates_before" => t.updates_before = parse(v)?,
            "train.updates_after" => t.updates_after = parse(v)?,
            "train.imagination_rollouts" => t.imagination_rollouts = parse(v)?,
            "train.imagination_horizon" => t.imagination_horizon = parse(v)?,
            "train.action_noise" => t.action_noise = parse(v)?,
            "train.replay_capacity" => t.replay_capacity = parse(v)?,
            "train.imagined_capacity" => t.imagined_capacity = parse(v)?,
            "train.early_stop_successes" => t.early_stop_successes = parse(v)?,
            "ablation.horizons" => self.ablation.horizons = parse_list(v)?,
            "ablation.trials" => self.ablation.trials = parse(v)?,
            "ablation.ms_per_step" => self.ablation.ms_per_step = parse(v)?,
            "predict.horizon" => self.predict_horizon = parse(v)?,
            "predict.episode" => self.predict_episode = v.to_string(),
            "bench.trials" => self.bench_trials = parse(v)?,
            _ => return Err(format!("unknown key '{key}'")),
        }
        Ok(())
    }

    /// Strict parse of config text; starts from the defaults.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Config { line: i + 1, msg };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected 'key = value', got '{line}'")))?;
            cfg.set(k.trim(), v.trim()).map_err(|e| err(format!("{}: {e}", k.trim())))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config { line: 0, msg: format!("{}: {e}", path.display()) })?;
        Self::parse_str(&text)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config { line: 0, msg: msg.into() });
        self.plant.validate()?;
        self.agent.validate()?;
        self.cem.validate()?;
        self.planner_config()?.validate()?;
        let t = &self.train;
        if t.offline_period == 0 {
            return bad("train.offline_period must be > 0");
        }
        if t.eval_episodes == 0 {
            return bad("train.eval_episodes must be >= 1");
        }
        if t.eval_every == 0 || t.episode_steps == 0 {
            return bad("train.eval_every and train.episode_steps must be > 0");
        }
        if t.replay_capacity == 0 || t.imagined_capacity == 0 || self.model.batch_size == 0 || self.model.prior_substeps == 0 {
            return bad("replay capacity, model batch size and prior substeps must be > 0");
        }
        if self.ablation.horizons.is_empty() || self.ablation.trials == 0 {
            return bad("ablation needs at least one horizon and one trial");
        }
        if self.delay.mode == DelayModeSetting::Fixed && self.delay.horizon_e > 0 {
            self.delay_config(self.delay.steps as f64 * self.plant.dt * 1e3)?;
        }
        Ok(())
    }

    pub fn model_kind(&self) -> ModelKind {
        match (self.model.kind, self.method) {
            (ModelChoice::Fixed(k), _) => k,
            (ModelChoice::Auto, Method::RtMpcBaseline) => ModelKind::DataDriven,
            (ModelChoice::Auto, _) => ModelKind::ResidualPhysics,
        }
    }

    pub fn prior(&self) -> PhysicalParams {
        self.plant.params
    }

    /// Planner settings for the configured method.
    pub fn planner_config(&self) -> Result<CemConfig> {
        let cfg = match self.method {
            Method::RtMpcBaseline => CemConfig {
                horizon: self.baseline_horizon,
                policy_candidates: 0,
                use_terminal_q: false,
                ..self.cem.clone()
            },
            _ => self.cem.clone(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Planning horizon seen by the delay protocol.
    pub fn horizon_p(&self) -> usize {
        match self.method {
            Method::RtHcp => self.cem.horizon,
            Method::RtMpcBaseline => self.baseline_horizon,
            Method::Td3 => 1,
        }
    }

    /// Delay protocol settings given the inference time to budget for. In
    /// fixed mode the delay is `delay.steps`; `delay.horizon_e = 0` derives
    /// H_e from `inference_ms`.
    pub fn delay_config(&self, inference_ms: f64) -> Result<DelayConfig> {
        let dt_ms = self.plant.dt * 1e3;
        let h_e = if self.delay.horizon_e == 0 {
            crate::delayrt::min_execution_horizon(inference_ms, dt_ms)
        } else {
            self.delay.horizon_e
        };
        let h_p = self.horizon_p().max(h_e);
        let mode = match self.delay.mode {
            DelayModeSetting::Fixed => DelayMode::Fixed(self.delay.steps),
            DelayModeSetting::Measured => DelayMode::Measured,
        };
        let cfg = DelayConfig {
            dt: self.plant.dt,
            horizon_p: h_p,
            horizon_e: h_e,
            mode,
            budget_check: self.delay.budget_check,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
