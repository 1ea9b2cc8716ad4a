//! Inference-delay handling: augmented delay-MDP observations, the action
//! buffer that keeps the plant fed while a plan is being computed, and the
//! d-step control loop.
//!
//! Time is simulated. A decision taken at tick `k` sees the current state,
//! the `d − 1` states before it and the `d` actions already committed for
//! ticks `k..k+d`. Its plan lands in the buffer at tick `k + d`, where the
//! first `H_e` actions are committed. The next decision fires as soon as no
//! plan is in flight and the buffer is back down to `d` actions, so with
//! `H_e ≥ d` the plant never runs dry.

use std::collections::VecDeque;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::agent::ActorCritic;
use crate::error::{Error, Result};
use crate::model::{DynamicsModel, Transition};
use crate::pendulum::{plant_step, PlantConfig, State};
use crate::planner::{cem_plan, pure_mpc_plan, CemConfig};

/// Smallest execution horizon covering an inference time: `⌊T_i/Δt⌋ + 1`.
pub fn min_execution_horizon(inference_ms: f64, dt_ms: f64) -> usize {
    assert!(dt_ms > 0.0, "dt must be positive");
    (inference_ms.max(0.0) / dt_ms).floor() as usize + 1
}

/// Non-empty action sequence within the voltage limit.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionSequence(Vec<f64>);

impl ActionSequence {
    pub fn new(actions: Vec<f64>, a_max: f64) -> Result<Self> {
        if actions.is_empty() {
            return Err(Error::InvalidParams("empty action sequence".into()));
        }
        if let Some(&a) = actions.iter().find(|a| !(a.abs() <= a_max)) {
            return Err(Error::ActionOutOfRange { action: a, limit: a_max });
        }
        Ok(Self(actions))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Delay-MDP observation at a decision point.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedState {
    pub current: State,
    /// The `d − 1` states preceding `current`, oldest first.
    pub missed: Vec<State>,
    /// The `d` actions committed for the ticks the pending inference covers.
    pub pending: Vec<f64>,
}

impl AugmentedState {
    pub fn delay(&self) -> usize {
        self.pending.len()
    }

    /// `[missed…, current, pending…]`, states oldest first; length `5d` for `d ≥ 1`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(4 * (self.missed.len() + 1) + self.pending.len());
        for s in self.missed.iter().chain(std::iter::once(&self.current)) {
            v.extend_from_slice(&s.to_array());
        }
        v.extend_from_slice(&self.pending);
        v
    }
}

/// Builds an augmented state from the last `d` states (oldest first, current
/// last) and the `d` pending actions.
pub fn make_augmented(history: &[State], pending: &[f64]) -> Result<AugmentedState> {
    if history.is_empty() || history.len() != pending.len().max(1) {
        return Err(Error::Shape {
            expected: pending.len().max(1),
            got: history.len(),
        });
    }
    let (current, missed) = history.split_last().unwrap();
    Ok(AugmentedState {
        current: *current,
        missed: missed.to_vec(),
        pending: pending.to_vec(),
    })
}

/// Predicted state at the moment the pending plan takes over.
pub fn estimate_decision_state(aug: &AugmentedState, model: &DynamicsModel) -> Result<State> {
    if aug.pending.is_empty() {
        return Ok(aug.current);
    }
    Ok(*model.rollout(&aug.current, &aug.pending)?.last().unwrap())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DelayMode {
    /// Inference takes exactly this many ticks of simulated time.
    Fixed(usize),
    /// Inference time is measured on the wall clock; plans land after `H_e` ticks.
    Measured,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DelayConfig {
    /// Control period, s.
    pub dt: f64,
    pub horizon_p: usize,
    pub horizon_e: usize,
    pub mode: DelayMode,
    pub budget_check: bool,
}

impl DelayConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) {
            return Err(Error::InvalidParams(format!("dt must be positive, got {}", self.dt)));
        }
        if self.horizon_e == 0 || self.horizon_e > self.horizon_p {
            return Err(Error::InvalidParams(format!(
                "need 1 <= H_e ({}) <= H_p ({})",
                self.horizon_e, self.horizon_p
            )));
        }
        Ok(())
    }

    /// Ticks between a decision and the arrival of its plan.
    pub fn delay_steps(&self) -> usize {
        match self.mode {
            DelayMode::Fixed(d) => d,
            DelayMode::Measured => self.horizon_e,
        }
    }

    pub fn dt_ms(&self) -> f64 {
        self.dt * 1e3
    }
}

/// Something that turns an augmented observation into a plan.
pub trait Controller {
    /// Returns at least one action; `warm` is the previous plan's unexecuted
    /// tail and `seed` is unique per decision.
    fn decide(&mut self, aug: &AugmentedState, warm: &[f64], seed: u64) -> Result<Vec<f64>>;
}

impl<F> Controller for F
where
    F: FnMut(&AugmentedState, &[f64], u64) -> Result<Vec<f64>>,
{
    fn decide(&mut self, aug: &AugmentedState, warm: &[f64], seed: u64) -> Result<Vec<f64>> {
        self(aug, warm, seed)
    }
}

fn add_action_noise(plan: &mut [f64], std: f64, a_max: f64, seed: u64) {
    if std <= 0.0 {
        return;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa5a5_5a5a);
    let normal = Normal::new(0.0, std).unwrap();
    for a in plan.iter_mut() {
        *a = (*a + normal.sample(&mut rng)).clamp(-a_max, a_max);
    }
}

/// Hybrid planning: predict the decision state, then CEM with terminal value
/// and policy candidates.
pub struct HybridController<'a> {
    pub model: &'a DynamicsModel,
    pub agent: &'a ActorCritic,
    pub cem: CemConfig,
    /// Extra Gaussian noise on committed actions (data collection only).
    pub action_noise: f64,
}

impl Controller for HybridController<'_> {
    fn decide(&mut self, aug: &AugmentedState, warm: &[f64], seed: u64) -> Result<Vec<f64>> {
        let s = estimate_decision_state(aug, self.model)?;
        let cfg = CemConfig {
            seed,
            ..self.cem.clone()
        };
        let mut plan = cem_plan(self.model, &s, &cfg, Some(self.agent), Some(warm))?.actions;
        add_action_noise(&mut plan, self.action_noise, self.model.prior.a_max, seed);
        Ok(plan)
    }
}

/// Plain CEM-MPC on a learned model.
pub struct MpcController<'a> {
    pub model: &'a DynamicsModel,
    pub cem: CemConfig,
    pub action_noise: f64,
}

impl Controller for MpcController<'_> {
    fn decide(&mut self, aug: &AugmentedState, warm: &[f64], seed: u64) -> Result<Vec<f64>> {
        let s = estimate_decision_state(aug, self.model)?;
        let cfg = CemConfig {
            seed,
            ..self.cem.clone()
        };
        let mut plan = pure_mpc_plan(self.model, &s, &cfg, Some(warm))?.actions;
        add_action_noise(&mut plan, self.action_noise, self.model.prior.a_max, seed);
        Ok(plan)
    }
}

/// Acts with the actor alone. Uses the model to predict the decision state
/// when one is given, otherwise acts on the current state.
pub struct PolicyController<'a> {
    pub agent: &'a ActorCritic,
    pub model: Option<&'a DynamicsModel>,
    pub exploration_std: f64,
}

impl Controller for PolicyController<'_> {
    fn decide(&mut self, aug: &AugmentedState, _warm: &[f64], seed: u64) -> Result<Vec<f64>> {
        let s = match self.model {
            Some(m) => estimate_decision_state(aug, m)?,
            None => aug.current,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(vec![self.agent.act(&s, self.exploration_std, &mut rng)])
    }
}

/// One plant tick of a delayed episode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TickRecord {
    pub tick: usize,
    pub t_ms: f64,
    /// State before the action was applied.
    pub state: State,
    pub action: f64,
    pub reward: f64,
    pub done: bool,
    pub next_state: State,
    /// Actions left in the buffer after this tick's action was consumed.
    pub buffer_depth: usize,
    /// Inference time of the decision taken at this tick (simulated in fixed
    /// mode, wall clock in measured mode), 0 when no decision was taken.
    pub inference_ms: f64,
    /// Wall-clock time of the decision, 0 when none.
    pub wall_ms: f64,
    /// True when the buffer was empty and the idle action was applied.
    pub gap: bool,
}

impl TickRecord {
    pub fn transition(&self) -> Transition {
        Transition {
            s: self.state,
            a: self.action,
            r: self.reward,
            s_next: self.next_state,
            done: self.done,
        }
    }
}

/// Observation and warm start at a decision tick.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionRecord {
    pub tick: usize,
    pub aug: AugmentedState,
    pub warm: Vec<f64>,
}

#[derive(Debug, Clone)]
struct InFlight {
    ready: usize,
    plan: Vec<f64>,
}

/// Seed handed to the controller for the decision taken at `tick`.
pub fn decision_seed(episode_seed: u64, tick: usize) -> u64 {
    let mut z = episode_seed ^ (tick as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Tick-by-tick driver of the delayed control protocol.
#[derive(Debug, Clone)]
pub struct DelayedLoop {
    cfg: DelayConfig,
    plant: PlantConfig,
    delay: usize,
    tick: usize,
    state: State,
    recent: VecDeque<State>,
    buffer: VecDeque<f64>,
    in_flight: Option<InFlight>,
    warm: Vec<f64>,
    rng: ChaCha8Rng,
    seed: u64,
    done: bool,
    violations: usize,
}

impl DelayedLoop {
    /// Fresh episode: the buffer is bootstrapped with `d` idle actions.
    pub fn new(plant: PlantConfig, cfg: DelayConfig, initial: State, seed: u64) -> Result<Self> {
        cfg.validate()?;
        plant.validate()?;
        let delay = cfg.delay_steps();
        if cfg.budget_check && cfg.horizon_e < delay {
            return Err(Error::BudgetViolation {
                tick: 0,
                inference_ms: delay as f64 * cfg.dt_ms(),
                budget_ms: cfg.horizon_e as f64 * cfg.dt_ms(),
            });
        }
        let missed = delay.saturating_sub(1);
        Ok(Self {
            cfg,
            plant,
            delay,
            tick: 0,
            state: initial,
            recent: std::iter::repeat_n(initial, missed).collect(),
            buffer: std::iter::repeat_n(0.0, delay).collect(),
            in_flight: None,
            warm: vec![0.0; cfg.horizon_p],
            rng: ChaCha8Rng::seed_from_u64(seed),
            seed,
            done: false,
            violations: 0,
        })
    }

    /// Restarts the protocol at a decision point from its augmented state.
    pub fn from_decision(
        plant: PlantConfig,
        cfg: DelayConfig,
        decision: &DecisionRecord,
        seed: u64,
    ) -> Result<Self> {
        let aug = &decision.aug;
        let mut lp = Self::new(plant, cfg, aug.current, seed)?;
        if aug.pending.len() != lp.delay || aug.missed.len() != lp.delay.saturating_sub(1) {
            return Err(Error::Shape {
                expected: lp.delay,
                got: aug.pending.len(),
            });
        }
        lp.tick = decision.tick;
        lp.recent = aug.missed.iter().copied().collect();
        lp.buffer = aug.pending.iter().copied().collect();
        lp.warm = decision.warm.clone();
        Ok(lp)
    }

    pub fn tick(&self) -> usize {
        self.tick
    }

    pub fn state(&self) -> State {
        self.state
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn budget_violations(&self) -> usize {
        self.violations
    }

    pub fn buffer_depth(&self) -> usize {
        self.buffer.len()
    }

    fn augmented(&self) -> AugmentedState {
        AugmentedState {
            current: self.state,
            missed: self.recent.iter().copied().collect(),
            pending: self.buffer.iter().copied().collect(),
        }
    }


    fn receive(&mut self) {
        let arrived = matches!(&self.in_flight, Some(f) if f.ready == self.tick);
        if !arrived {
            return;
        }
        let InFlight { plan, .. } = self.in_flight.take().unwrap();
        let h_e = self.cfg.horizon_e;
        let last = *plan.last().unwrap_or(&0.0);
        for k in 0..h_e {
            self.buffer.push_back(plan.get(k).copied().unwrap_or(last));
        }
        self.warm = plan.iter().skip(h_e).copied().collect();
        self.warm.resize(self.cfg.horizon_p, 0.0);
    }

    /// Runs one plant tick. `on_decision` sees every decision observation.
    pub fn step_with<C: Controller + ?Sized>(
        &mut self,
        controller: &mut C,
        mut on_decision: impl FnMut(&DecisionRecord),
    ) -> Result<TickRecord> {
        if self.done {
            return Err(Error::InvalidParams("episode already finished".into()));
        }
        self.receive();
        let mut inference_ms = 0.0;
        let mut wall_ms = 0.0;
        if self.in_flight.is_none() && self.buffer.len() <= self.delay {
            let aug = self.augmented();
            on_decision(&DecisionRecord {
                tick: self.tick,
                aug: aug.clone(),
                warm: self.warm.clone(),
            });
            let seed = decision_seed(self.seed, self.tick);
            let start = Instant::now();
            let plan = controller.decide(&aug, &self.warm, seed)?;
            wall_ms = start.elapsed().as_secs_f64() * 1e3;
            if plan.is_empty() {
                return Err(Error::InvalidParams("controller returned an empty plan".into()));
            }
            let a_max = self.plant.params.a_max;
            if let Some(&a) = plan.iter().find(|a| !(a.abs() <= a_max)) {
                return Err(Error::ActionOutOfRange { action: a, limit: a_max });
            }
            inference_ms = match self.cfg.mode {
                DelayMode::Fixed(d) => d as f64 * self.cfg.dt_ms(),
                DelayMode::Measured => wall_ms,
            };
            let budget_ms = self.cfg.horizon_e as f64 * self.cfg.dt_ms();
            if self.cfg.mode == DelayMode::Measured && inference_ms > budget_ms {
                self.violations += 1;
                if self.cfg.budget_check {
                    return Err(Error::BudgetViolation {
                        tick: self.tick,
                        inference_ms,
                        budget_ms,
                    });
                }
            }
            self.in_flight = Some(InFlight {
                ready: self.tick + self.delay,
                plan,
            });
            self.receive();
        }

        let (action, gap) = match self.buffer.pop_front() {
            Some(a) => (a, false),
            None => (0.0, true),
        };
        let out = plant_step(&self.state, action, &self.plant, &mut self.rng)?;
        let record = TickRecord {
            tick: self.tick,
            t_ms: self.tick as f64 * self.cfg.dt_ms(),
            state: self.state,
            action,
            reward: out.reward,
            done: out.done,
            next_state: out.next,
            buffer_depth: self.buffer.len(),
            inference_ms,
            wall_ms,
            gap,
        };
        if self.delay > 1 {
            self.recent.push_back(self.state);
            while self.recent.len() > self.delay - 1 {
                self.recent.pop_front();
            }
        }
        self.state = out.next;
        self.tick += 1;
        self.done = out.done;
        Ok(record)
    }

    pub fn step<C: Controller + ?Sized>(&mut self, controller: &mut C) -> Result<TickRecord> {
        self.step_with(controller, |_| {})
    }
}

/// Complete record of one delayed episode.
#[derive(Debug, Clone, PartialEq)]
pub struct DelayedEpisodeLog {
    pub records: Vec<TickRecord>,
    pub decisions: Vec<DecisionRecord>,
    pub episode_return: f64,
    /// Seconds until the pendulum first stays upright for 1 s; ∞ if never.
    pub swing_up_time: f64,
    /// Largest |α| after the first successful swing-up; ∞ if none.
    pub rotor_deviation: f64,
    pub budget_violations: usize,
    pub gaps: usize,
}

/// Upright tolerance for the swing-up criterion, rad.
pub const UPRIGHT_TOLERANCE: f64 = 0.2;
/// How long the pendulum must stay upright, s.
pub const UPRIGHT_HOLD: f64 = 1.0;

impl DelayedEpisodeLog {
    pub fn from_records(records: Vec<TickRecord>, decisions: Vec<DecisionRecord>, dt: f64, violations: usize) -> Self {
        let episode_return = records.iter().map(|r| r.reward).sum();
        let hold = (UPRIGHT_HOLD / dt).round().max(1.0) as usize;
        let mut states: Vec<State> = records.iter().map(|r| r.state).collect();
        if let Some(last) = records.last() {
            states.push(last.next_state);
        }
        let mut run = 0usize;
        let mut success_start = None;
        for (k, s) in states.iter().enumerate() {
            if s.upright_error() < UPRIGHT_TOLERANCE {
                run += 1;
                if run >= hold {
                    success_start = Some(k + 1 - run);
                    break;
                }
            } else {
                run = 0;
            }
        }
        let (swing_up_time, rotor_deviation) = match success_start {
            Some(k) => (
                k as f64 * dt,
                states[k..].iter().map(|s| s.alpha.abs()).fold(0.0, f64::max),
            ),
            None => (f64::INFINITY, f64::INFINITY),
        };
        let gaps = records.iter().filter(|r| r.gap).count();
        Self {
            records,
            decisions,
            episode_return,
            swing_up_time,
            rotor_deviation,
            budget_violations: violations,
            gaps,
        }
    }

    pub fn succeeded(&self) -> bool {
        self.swing_up_time.is_finite()
    }

    pub fn actions(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.action).collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "t_ms",
            "alpha",
            "beta",
            "alpha_dot",
            "beta_dot",
            "action_V",
            "reward",
            "buffer_depth",
            "inference_ms",
        ])?;
        for r in &self.records {
            w.write_record(&[
                format!("{}", r.t_ms),
                format!("{}", r.state.alpha),
                format!("{}", r.state.beta),
                format!("{}", r.state.alpha_dot),
                format!("{}", r.state.beta_dot),
                format!("{}", r.action),
                format!("{}", r.reward),
                format!("{}", r.buffer_depth),
                format!("{}", r.inference_ms),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Logged `(state, action)` rows read back from an episode CSV.
pub fn read_episode_csv(path: &Path) -> Result<Vec<(f64, State, f64)>> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Mismatch(format!("episode log has no '{name}' column")))
    };
    let idx = [
        col("t_ms")?,
        col("alpha")?,
        col("beta")?,
        col("alpha_dot")?,
        col("beta_dot")?,
        col("action_V")?,
    ];
    let mut rows = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let v = idx
            .iter()
            .map(|&i| {
                rec.get(i)
                    .and_then(|s| s.parse::<f64>().ok())
                    .ok_or_else(|| Error::Mismatch(format!("bad value in row {}", line + 1)))
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push((v[0], State::new(v[1], v[2], v[3], v[4]), v[5]));
    }
    Ok(rows)
}

/// Runs the delayed protocol until termination or `max_steps` ticks.
pub fn run_delayed_episode<C: Controller + ?Sized>(
    plant: &PlantConfig,
    controller: &mut C,
    delay: &DelayConfig,
    initial: State,
    max_steps: usize,
    seed: u64,
) -> Result<DelayedEpisodeLog> {
    let lp = DelayedLoop::new(*plant, *delay, initial, seed)?;
    continue_episode(lp, controller, max_steps)
}

/// Drives an existing loop until termination or tick `max_steps`.
pub fn continue_episode<C: Controller + ?Sized>(
    mut lp: DelayedLoop,
    controller: &mut C,
    max_steps: usize,
) -> Result<DelayedEpisodeLog> {
    let mut records = Vec::with_capacity(max_steps.saturating_sub(lp.tick()));
    let mut decisions = Vec::new();
    while lp.tick() < max_steps && !lp.is_done() {
        records.push(lp.step_with(controller, |d| decisions.push(d.clone()))?);
    }
    Ok(DelayedEpisodeLog::from_records(
        records,
        decisions,
        lp.cfg.dt,
        lp.budget_violations(),
    ))
}

/// Start state near the hanging equilibrium, perturbed per seed.
pub fn hanging_start(seed: u64) -> State {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5eed);
    State::new(
        rng.gen_range(-0.05..0.05),
        rng.gen_range(-0.05..0.05),
        0.0,
        0.0,
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InferenceStats {
    pub mean_ms: f64,
    pub std_ms: f64,
    pub trials: usize,
}

/// Wall-clock timing of full `decide` calls on random observations.
pub fn measure_inference_time<C: Controller + ?Sized>(
    controller: &mut C,
    delay: usize,
    n_trials: usize,
    seed: u64,
) -> InferenceStats {
    let n = n_trials.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut times = Vec::with_capacity(n);
    for k in 0..n {
        let s = State::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-3.0..3.0),
            rng.gen_range(-5.0..5.0),
            rng.gen_range(-5.0..5.0),
        );
        let aug = AugmentedState {
            current: s,
            missed: vec![s; delay.saturating_sub(1)],
            pending: vec![0.0; delay],
        };
        let start = Instant::now();
        let _ = controller.decide(&aug, &[], seed.wrapping_add(k as u64));
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    let mean = times.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    InferenceStats {
        mean_ms: mean,
        std_ms: std,
        trials: n,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelKind;
    use crate::pendulum::{step_prior_substeps, PhysicalParams};

    #[test]
    fn reference_horizon_rows() {
        assert_eq!(min_execution_horizon(16.0, 20.0), 1);
        assert_eq!(min_execution_horizon(47.0, 20.0), 3);
        assert_eq!(min_execution_horizon(156.0, 20.0), 8);
        assert_eq!(min_execution_horizon(36.0, 20.0), 2);
        assert_eq!(min_execution_horizon(0.0, 20.0), 1);
        assert_eq!(min_execution_horizon(40.0, 20.0), 3);
    }

    #[test]
    fn augmented_layout() {
        let s = |k: f64| State::new(k, k, k, k);
        let a1 = make_augmented(&[s(1.0)], &[0.5]).unwrap();
        assert!(a1.missed.is_empty());
        assert_eq!(a1.flatten().len(), 5);
        let a3 = make_augmented(&[s(1.0), s(2.0), s(3.0)], &[0.1, 0.2, 0.3]).unwrap();
        let flat = a3.flatten();
        assert_eq!(flat.len(), 15);
        assert_eq!(&flat[..4], &[1.0; 4]);
        assert_eq!(&flat[8..12], &[3.0; 4]);
        assert_eq!(&flat[12..], &[0.1, 0.2, 0.3]);
        assert!(make_augmented(&[s(1.0), s(2.0)], &[0.1]).is_err());
    }

    #[test]
    fn decision_state_estimation() {
        let p = PhysicalParams::default();
        let m = DynamicsModel::zero(ModelKind::ResidualPhysics, p, 0.02, 4);
        let s = State::new(0.1, 0.5, 1.0, -1.0);
        let aug = make_augmented(&[s], &[2.0]).unwrap();
        assert_eq!(
            estimate_decision_state(&aug, &m).unwrap(),
            step_prior_substeps(&s, 2.0, 0.02, 4, &p)
        );
        let rest = State::default();
        let aug = make_augmented(&[rest, rest, rest], &[0.0; 3]).unwrap();
        assert_eq!(estimate_decision_state(&aug, &m).unwrap(), rest);
        let aug = make_augmented(&[rest, s], &[1.0, -1.0]).unwrap();
        assert_eq!(
            estimate_decision_state(&aug, &m).unwrap(),
            *m.rollout(&s, &[1.0, -1.0]).unwrap().last().unwrap()
        );
    }

    #[test]
    fn action_sequence_validation() {
        assert!(ActionSequence::new(vec![], 6.0).is_err());
        assert!(ActionSequence::new(vec![1.0, 7.0], 6.0).is_err());
        assert_eq!(ActionSequence::new(vec![1.0, -6.0], 6.0).unwrap().len(), 2);
    }

    #[test]
    fn delay_config_validation() {
        let ok = DelayConfig {
            dt: 0.02,
            horizon_p: 5,
            horizon_e: 2,
            mode: DelayMode::Fixed(2),
            budget_check: true,
        };
        ok.validate().unwrap();
        assert!(DelayConfig { horizon_e: 0, ..ok }.validate().is_err());
        assert!(DelayConfig { horizon_e: 6, ..ok }.validate().is_err());
        let short = DelayConfig { horizon_e: 1, ..ok };
        assert!(matches!(
            DelayedLoop::new(PlantConfig::default(), short, State::default(), 0),
            Err(Error::BudgetViolation { .. })
        ));
    }

    #[test]
    fn swing_up_metrics() {
        let dt = 0.02;
        let mk = |k: usize, beta: f64, alpha: f64| TickRecord {
            tick: k,
            t_ms: k as f64 * 20.0,
            state: State::new(alpha, beta, 0.0, 0.0),
            action: 0.0,
            reward: 1.0,
            done: false,
            next_state: State::new(alpha, beta, 0.0, 0.0),
            buffer_depth: 0,
            inference_ms: 0.0,
            wall_ms: 0.0,
            gap: false,
        };
        let mut recs: Vec<TickRecord> = (0..10).map(|k| mk(k, 0.0, 0.0)).collect();
        recs.extend((10..80).map(|k| mk(k, -std::f64::consts::PI + 0.1, 0.3 + 0.001 * k as f64)));
        let log = DelayedEpisodeLog::from_records(recs, vec![], dt, 0);
        assert!((log.swing_up_time - 0.2).abs() < 1e-12);
        assert!((log.rotor_deviation - 0.379).abs() < 1e-12);

        let recs: Vec<TickRecord> = (0..100).map(|k| mk(k, 0.0, 0.0)).collect();
        let log = DelayedEpisodeLog::from_records(recs, vec![], dt, 0);
        assert!(!log.succeeded());
        assert_eq!(log.rotor_deviation, f64::INFINITY);
    }

    #[test]
    fn single_trial_timing_has_zero_std() {
        let mut c = |_: &AugmentedState, _: &[f64], _: u64| -> Result<Vec<f64>> { Ok(vec![0.0]) };
        let st = measure_inference_time(&mut c, 1, 1, 0);
        assert_eq!(st.std_ms, 0.0);
        assert!(st.mean_ms >= 0.0);
    }
}
