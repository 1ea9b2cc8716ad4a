//! Experiment suites run on trained checkpoints: evaluation, horizon
//! ablation, multi-step prediction accuracy and inference benchmarks.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::agent::ActorCritic;
use crate::delayrt::{min_execution_horizon, DelayConfig, DelayMode, InferenceStats};
use crate::error::{Error, Result};
use crate::harness::config::{DelayModeSetting, ExperimentConfig, Method};
use crate::harness::stats::{ci95_half_width, derive_seed, mean_std};
use crate::harness::train::{Evaluation, Policy};
use crate::model::{DynamicsModel, ModelKind, ModelTrainer, ReplayBuffer, Transition};
use crate::pendulum::{is_terminal, plant_step, PlantConfig, State};

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub horizon: usize,
    pub horizon_e: usize,
    pub inference_ms: f64,
    pub mean_return: f64,
    pub ci_half_width: Option<f64>,
    pub successes: usize,
    pub trials: usize,
}

/// Config with the method's planning horizon replaced by `h`.
fn with_horizon(cfg: &ExperimentConfig, h: usize) -> ExperimentConfig {
    let mut c = cfg.clone();
    match c.method {
        Method::RtMpcBaseline => c.baseline_horizon = h,
        _ => c.cem.horizon = h,
    }
    c
}

/// Evaluates the policy at each planning horizon with H_e tied to the
/// inference time: `ms_per_step · H` in fixed mode, the wall clock in
/// measured mode. Rows come back sorted by horizon.
pub fn ablate_horizon(
    cfg: &ExperimentConfig,
    model: Option<&DynamicsModel>,
    agent: Option<&ActorCritic>,
    horizons: &[usize],
    trials: usize,
) -> Result<Vec<AblationRow>> {
    if trials == 0 || horizons.contains(&0) {
        return Err(Error::InvalidParams("ablation needs trials >= 1 and horizons >= 1".into()));
    }
    let mut hs = horizons.to_vec();
    hs.sort_unstable();
    hs.dedup();
    let dt_ms = cfg.plant.dt * 1e3;
    let mut rows = Vec::with_capacity(hs.len());
    for h in hs {
        let c = with_horizon(cfg, h);
        let policy = Policy { cfg: &c, model, agent };
        let (inference_ms, mode) = match cfg.delay.mode {
            DelayModeSetting::Fixed => {
                let t = cfg.ablation.ms_per_step * h as f64;
                (t, DelayMode::Fixed(min_execution_horizon(t, dt_ms)))
            }
            DelayModeSetting::Measured => (policy.measure_inference(cfg.bench_trials)?.mean_ms, DelayMode::Measured),
        };
        let h_e = min_execution_horizon(inference_ms, dt_ms);
        let delay = DelayConfig {
            dt: cfg.plant.dt,
            horizon_p: h.max(h_e),
            horizon_e: h_e,
            mode,
            budget_check: false,
        };
        let logs = policy.evaluate_logs(&delay, trials)?;
        let eval = Evaluation::from_logs(&logs);
        rows.push(AblationRow {
            horizon: h,
            horizon_e: h_e,
            inference_ms,
            mean_return: eval.mean_return,
            ci_half_width: eval.ci_half_width,
            successes: eval.successes,
            trials,
        });
    }
    Ok(rows)
}

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "horizon",
        "horizon_e",
        "inference_ms",
        "mean_return",
        "ci95_half_width",
        "successes",
        "trials",
    ])?;
    for r in rows {
        w.write_record(&[
            r.horizon.to_string(),
            r.horizon_e.to_string(),
            r.inference_ms.to_string(),
            r.mean_return.to_string(),
            r.ci_half_width.map(|h| h.to_string()).unwrap_or_default(),
            r.successes.to_string(),
            r.trials.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One logged episode: states `states[k]` with `actions[k]` applied after it.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<State>,
    pub actions: Vec<f64>,
}

impl Trajectory {
    /// Transitions between consecutive logged states.
    pub fn transitions(&self, a_max: f64) -> Vec<Transition> {
        self.states
            .windows(2)
            .zip(&self.actions)
            .map(|(w, &a)| Transition {
                s: w[0],
                a,
                r: crate::pendulum::reward(&w[0], a, a_max),
                s_next: w[1],
                done: is_terminal(&w[1]),
            })
            .collect()
    }

    /// From `(t_ms, state, action)` rows of an episode CSV.
    pub fn from_rows(rows: &[(f64, State, f64)]) -> Self {
        Self {
            states: rows.iter().map(|r| r.1).collect(),
            actions: rows.iter().map(|r| r.2).collect(),
        }
    }
}

/// Open-loop plant episode under piecewise-constant random voltages held
/// for 1 to 10 ticks. Stops early on termination. `states` has one more
/// entry than `actions`.
pub fn excitation_episode(plant: &PlantConfig, steps: usize, seed: u64) -> Result<Trajectory> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a_max = plant.params.a_max;
    let mut s = State::new(rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), 0.0, 0.0);
    let mut states = vec![s];
    let mut actions = Vec::with_capacity(steps);
    let mut a = 0.0;
    let mut hold = 0;
    for _ in 0..steps {
        if hold == 0 {
            a = rng.gen_range(-a_max..=a_max);
            hold = rng.gen_range(1..=10);
        }
        hold -= 1;
        let out = plant_step(&s, a, plant, &mut rng)?;
        actions.push(a);
        states.push(out.next);
        s = out.next;
        if out.done {
            break;
        }
    }
    Ok(Trajectory { states, actions })
}

/// Gathers at least `n` transitions from excitation episodes.
pub fn collect_transitions(plant: &PlantConfig, n: usize, episode_steps: usize, seed: u64) -> Result<Vec<Transition>> {
    let mut out = Vec::with_capacity(n);
    let mut k = 0;
    while out.len() < n {
        let tr = excitation_episode(plant, episode_steps, derive_seed(seed, 0x636f_6c6c, k))?;
        out.extend(tr.transitions(plant.params.a_max));
        k += 1;
    }
    out.truncate(n);
    Ok(out)
}

/// Fits a fresh model of `kind` to `data` with the configured optimizer.
pub fn fit_model(cfg: &ExperimentConfig, kind: ModelKind, data: &[Transition], epochs: usize, seed: u64) -> Result<DynamicsModel> {
    let mut model = DynamicsModel::new(kind, cfg.prior(), cfg.plant.dt, cfg.model.prior_substeps, seed)?;
    let mut buf = ReplayBuffer::new(data.len().max(1), seed ^ 1);
    for t in data {
        buf.push(*t);
    }
    model.fit_normalizer(&buf);
    let mut trainer = ModelTrainer::new(&model, cfg.model.lr, cfg.model.batch_size, cfg.model.max_batches, seed ^ 2);
    for _ in 0..epochs {
        model.train_epoch(&buf, &mut trainer)?;
    }
    Ok(model)
}

fn state_error(a: &State, b: &State) -> f64 {
    let (x, y) = (a.to_array(), b.to_array());
    x.iter().zip(&y).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt()
}

/// Multi-step predictions of several models against one logged trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionTable {
    pub names: Vec<String>,
    /// Ground truth after 1..=horizon actions.
    pub truth: Vec<State>,
    /// Per model, predicted states aligned with `truth`.
    pub predicted: Vec<Vec<State>>,
    /// Per model, Euclidean state error per step.
    pub errors: Vec<Vec<f64>>,
}

impl PredictionTable {
    pub fn mean_error(&self, model: usize) -> f64 {
        mean_std(&self.errors[model]).0
    }
}

/// Rolls every model out from the trajectory's first state with its
/// recorded actions. A model that diverges gets infinite error from that
/// step on.
pub fn predict_rollout(models: &[(&str, &DynamicsModel)], traj: &Trajectory, horizon: usize) -> Result<PredictionTable> {
    if horizon == 0 {
        return Err(Error::InvalidParams("prediction horizon must be >= 1".into()));
    }
    if traj.states.len() < horizon + 1 || traj.actions.len() < horizon {
        return Err(Error::Mismatch(format!(
            "episode has {} transitions, horizon {horizon} requested",
            traj.actions.len().min(traj.states.len().saturating_sub(1))
        )));
    }
    let truth = traj.states[1..=horizon].to_vec();
    let actions = &traj.actions[..horizon];
    let mut predicted = Vec::new();
    let mut errors = Vec::new();
    for (_, m) in models {
        let mut s = traj.states[0];
        let mut states = Vec::with_capacity(horizon);
        for &a in actions {
            s = if s.is_finite() {
                m.predict(&s, a)?
            } else {
                s
            };
            states.push(s);
        }
        let errs = states
            .iter()
            .zip(&truth)
            .map(|(p, t)| if p.is_finite() { state_error(p, t) } else { f64::INFINITY })
            .collect();
        predicted.push(states);
        errors.push(errs);
    }
    Ok(PredictionTable {
        names: models.iter().map(|(n, _)| n.to_string()).collect(),
        truth,
        predicted,
        errors,
    })
}

pub fn write_prediction_csv(path: &Path, table: &PredictionTable, dt: f64) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let comps = ["alpha", "beta", "alpha_dot", "beta_dot"];
    let mut header = vec!["step".to_string(), "t_ms".to_string()];
    header.extend(comps.iter().map(|c| format!("true_{c}")));
    for n in &table.names {
        header.extend(comps.iter().map(|c| format!("{n}_{c}")));
        header.push(format!("{n}_error"));
    }
    w.write_record(&header)?;
    for (k, t) in table.truth.iter().enumerate() {
        let mut row = vec![(k + 1).to_string(), ((k + 1) as f64 * dt * 1e3).to_string()];
        row.extend(t.to_array().iter().map(|x| x.to_string()));
        for (m, states) in table.predicted.iter().enumerate() {
            row.extend(states[k].to_array().iter().map(|x| x.to_string()));
            row.push(table.errors[m][k].to_string());
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub method: Method,
    pub horizon_p: usize,
    pub stats: InferenceStats,
    /// T_i / Δt.
    pub implied_delay: f64,
    pub horizon_e_min: usize,
}

/// Wall-clock decision cost of each method with freshly initialized
/// networks (cost does not depend on the weights).
pub fn bench_inference(cfg: &ExperimentConfig) -> Result<Vec<BenchRow>> {
    let dt_ms = cfg.plant.dt * 1e3;
    let mut rows = Vec::new();
    for method in [Method::Td3, Method::RtHcp, Method::RtMpcBaseline] {
        let c = ExperimentConfig {
            method,
            ..cfg.clone()
        };
        let fresh = crate::harness::train::Learner::new(c.clone())?;
        let stats = fresh.policy().measure_inference(cfg.bench_trials)?;
        rows.push(BenchRow {
            method,
            horizon_p: c.horizon_p(),
            implied_delay: stats.mean_ms / dt_ms,
            horizon_e_min: min_execution_horizon(stats.mean_ms, dt_ms),
            stats,
        });
    }
    Ok(rows)
}

pub fn write_bench_csv(path: &Path, rows: &[BenchRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["method", "H_p", "mean_ms", "std_ms", "implied_delay", "H_e_min"])?;
    for r in rows {
        w.write_record(&[
            r.method.to_string(),
            r.horizon_p.to_string(),
            r.stats.mean_ms.to_string(),
            r.stats.std_ms.to_string(),
            r.implied_delay.to_string(),
            r.horizon_e_min.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Mean rollout error summary used by the prediction experiment.
pub fn mean_and_ci(xs: &[f64]) -> (f64, Option<f64>) {
    (mean_std(xs).0, ci95_half_width(xs))
}
