//! Cross-entropy-method trajectory optimization.
//!
//! [`cem_optimize`] is the generic optimizer over fixed-length action
//! sequences. [`cem_plan`] instantiates it with the hybrid objective: the
//! discounted known reward along a model rollout plus a discounted twin-min
//! terminal value, with part of each population proposed by the policy.
//! [`pure_mpc_plan`] drops both learned-policy ingredients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::agent::ActorCritic;
use crate::error::{Error, Result};
use crate::model::DynamicsModel;
use crate::parallel::{map_chunks, Execution, CHUNK};
use crate::pendulum::{is_terminal, reward, State};

#[derive(Debug, Clone, PartialEq)]
pub struct CemConfig {
    pub iterations: usize,
    pub population: usize,
    pub policy_candidates: usize,
    pub elite_count: usize,
    pub init_std: f64,
    pub min_std: f64,
    pub horizon: usize,
    pub gamma: f64,
    pub use_terminal_q: bool,
    /// Exploration std on policy-proposed candidates, V.
    pub candidate_noise: f64,
    /// Subtracted once when a rollout reaches a terminal state.
    pub terminal_penalty: f64,
    pub seed: u64,
    pub execution: Execution,
}

impl CemConfig {
    /// Hybrid planner defaults: I=3, P=500 with 50 policy candidates, H=5.
    pub fn hybrid(a_max: f64) -> Self {
        Self {
            iterations: 3,
            population: 500,
            policy_candidates: 50,
            elite_count: 50,
            init_std: 0.5 * a_max,
            min_std: 0.05 * a_max,
            horizon: 5,
            gamma: 0.99,
            use_terminal_q: true,
            candidate_noise: 0.1 * a_max,
            terminal_penalty: 1.0,
            seed: 0,
            execution: Execution::Auto,
        }
    }

    /// Plain CEM-MPC baseline: no terminal value, no policy candidates, H=15.
    pub fn pure_mpc(a_max: f64) -> Self {
        Self {
            policy_candidates: 0,
            use_terminal_q: false,
            horizon: 15,
            ..Self::hybrid(a_max)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParams(format!("cem: {m}")));
        if self.iterations == 0 {
            return bad("iterations must be >= 1");
        }
        if self.population == 0 || self.horizon == 0 {
            return bad("population and horizon must be >= 1");
        }
        if self.elite_count == 0 || self.elite_count > self.population {
            return bad("elite_count must be in 1..=population");
        }
        if self.policy_candidates > self.population {
            return bad("policy_candidates must not exceed population");
        }
        if !(self.min_std > 0.0) || !(self.init_std >= self.min_std) {
            return bad("need init_std >= min_std > 0");
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma must be in [0, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub actions: Vec<f64>,
    pub predicted_return: f64,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Scores fixed-length action sequences for [`cem_optimize`].
pub trait SequenceObjective: Sync {
    /// Scores `seqs.len() / horizon` row-major sequences. Higher is better.
    fn score(&self, seqs: &[f64], horizon: usize) -> Vec<f64>;

    /// Up to `n` policy-generated sequences (row-major). Default: none.
    fn propose(&self, _n: usize, _horizon: usize, _noise_std: f64, _rng: &mut ChaCha8Rng) -> Vec<f64> {
        Vec::new()
    }
}

fn score_or_floor(x: f64) -> f64 {
    if x.is_nan() {
        f64::NEG_INFINITY
    } else {
        x
    }
}

/// Generic CEM with a diagonal Gaussian per time step.
///
/// Row 0 of every population is the current mean, so the returned plan never
/// scores below the warm start: at the end the final elite mean is returned
/// unless some evaluated sample scored strictly higher.
pub fn cem_optimize<O: SequenceObjective>(
    objective: &O,
    cfg: &CemConfig,
    a_max: f64,
    warm_start: Option<&[f64]>,
) -> Result<Plan> {
    cfg.validate()?;
    let h = cfg.horizon;
    let p = cfg.population;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut mean = vec![0.0; h];
    if let Some(w) = warm_start {
        for (m, v) in mean.iter_mut().zip(w) {
            *m = v.clamp(-a_max, a_max);
        }
    }
    let mut std = vec![cfg.init_std; h];
    let mut best: Option<(f64, Vec<f64>)> = None;
    let score_all = |pop: &[f64]| -> Vec<f64> {
        map_chunks(pop.len() / h, CHUNK, cfg.execution, |r| {
            objective.score(&pop[r.start * h..r.end * h], h)
        })
    };

    for _ in 0..cfg.iterations {
        let mut pop = Vec::with_capacity(p * h);
        pop.extend_from_slice(&mean);
        let n_policy = cfg.policy_candidates.min(p - 1);
        let proposed = if n_policy > 0 {
            let mut v = objective.propose(n_policy, h, cfg.candidate_noise, &mut rng);
            v.truncate(n_policy * h);
            v.iter_mut().for_each(|a| *a = a.clamp(-a_max, a_max));
            v
        } else {
            Vec::new()
        };
        let n_gauss = p - 1 - proposed.len() / h;
        for _ in 0..n_gauss {
            for t in 0..h {
                let z: f64 = rng.sample(StandardNormal);
                pop.push((mean[t] + std[t] * z).clamp(-a_max, a_max));
            }
        }
        pop.extend_from_slice(&proposed);

        let scores: Vec<f64> = score_all(&pop).into_iter().map(score_or_floor).collect();
        let mut order: Vec<usize> = (0..p).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        let top = order[0];
        if best.as_ref().is_none_or(|(s, _)| scores[top] > *s) {
            best = Some((scores[top], pop[top * h..(top + 1) * h].to_vec()));
        }

        let elites = &order[..cfg.elite_count];
        let k = elites.len() as f64;
        for t in 0..h {
            let m = elites.iter().map(|&i| pop[i * h + t]).sum::<f64>() / k;
            let var = elites
                .iter()
                .map(|&i| (pop[i * h + t] - m).powi(2))
                .sum::<f64>()
                / k;
            mean[t] = m.clamp(-a_max, a_max);
            std[t] = var.sqrt().max(cfg.min_std);
        }
    }

    let mean_score = score_or_floor(objective.score(&mean, h)[0]);
    let (actions, predicted_return) = match best {
        Some((s, seq)) if s > mean_score => (seq, s),
        _ => (mean.clone(), mean_score),
    };
    Ok(Plan {
        actions,
        predicted_return,
        mean,
        std,
    })
}

/// Discounted model-rollout reward plus optional discounted terminal value.
pub struct HybridObjective<'a> {
    pub model: &'a DynamicsModel,
    pub s0: State,
    pub agent: Option<&'a ActorCritic>,
    pub gamma: f64,
    pub use_terminal_q: bool,
    pub terminal_penalty: f64,
    pub a_max: f64,
}

impl SequenceObjective for HybridObjective<'_> {
    fn score(&self, seqs: &[f64], horizon: usize) -> Vec<f64> {
        let n = seqs.len() / horizon;
        let mut states = vec![self.s0; n];
        let mut returns = vec![0.0; n];
        let mut alive = vec![true; n];
        let mut discount = 1.0;
        let mut step_actions = vec![0.0; n];
        for t in 0..horizon {
            for i in 0..n {
                step_actions[i] = seqs[i * horizon + t];
                if alive[i] {
                    returns[i] += discount * reward(&states[i], step_actions[i], self.a_max);
                }
            }
            let next = match self.model.predict_batch(&states, &step_actions) {
                Ok(v) => v,
                Err(_) => return vec![f64::NEG_INFINITY; n],
            };
            discount *= self.gamma;
            for i in 0..n {
                if !alive[i] {
                    continue;
                }
                let s = next[i];
                if !s.is_finite() {
                    returns[i] = f64::NEG_INFINITY;
                    alive[i] = false;
                } else if is_terminal(&s) {
                    returns[i] -= discount * self.terminal_penalty;
                    alive[i] = false;
                }
                states[i] = s;
            }
        }
        if let (true, Some(agent)) = (self.use_terminal_q, self.agent) {
            let idx: Vec<usize> = (0..n).filter(|&i| alive[i]).collect();
            if !idx.is_empty() {
                let finals: Vec<State> = idx.iter().map(|&i| states[i]).collect();
                let q = agent.q_batch(&finals, None);
                for (&i, v) in idx.iter().zip(q) {
                    returns[i] += discount * v;
                }
            }
        }
        returns
    }

    fn propose(&self, n: usize, horizon: usize, noise_std: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let Some(agent) = self.agent else {
            return Vec::new();
        };
        let mut states = vec![self.s0; n];
        let mut seqs = vec![0.0; n * horizon];
        for t in 0..horizon {
            let base = agent.act_batch(&states);
            let mut acts = Vec::with_capacity(n);
            for (i, a) in base.into_iter().enumerate() {
                let z: f64 = rng.sample(StandardNormal);
                let a = if a.is_finite() { a + noise_std * z } else { 0.0 };
                let a = a.clamp(-self.a_max, self.a_max);
                seqs[i * horizon + t] = a;
                acts.push(a);
            }
            if t + 1 < horizon {
                match self.model.predict_batch(&states, &acts) {
                    Ok(next) => states = next,
                    Err(_) => break,
                }
            }
        }
        seqs
    }
}

/// Objective value of one action sequence under the hybrid objective.
pub fn evaluate_sequence(
    model: &DynamicsModel,
    s0: &State,
    actions: &[f64],
    gamma: f64,
    agent: Option<&ActorCritic>,
    use_terminal_q: bool,
) -> f64 {
    let obj = HybridObjective {
        model,
        s0: *s0,
        agent,
        gamma,
        use_terminal_q,
        terminal_penalty: 1.0,
        a_max: model.prior.a_max,
    };
    obj.score(actions, actions.len())[0]
}

/// Hybrid CEM plan from `s0`.
pub fn cem_plan(
    model: &DynamicsModel,
    s0: &State,
    cfg: &CemConfig,
    agent: Option<&ActorCritic>,
    warm_start: Option<&[f64]>,
) -> Result<Plan> {
    if !s0.is_finite() {
        return Err(Error::NonFinite(format!("planning state {s0:?}")));
    }
    cfg.validate()?;
    let a_max = model.prior.a_max;
    let obj = HybridObjective {
        model,
        s0: *s0,
        agent,
        gamma: cfg.gamma,
        use_terminal_q: cfg.use_terminal_q,
        terminal_penalty: cfg.terminal_penalty,
        a_max,
    };
    let mut cfg = cfg.clone();
    if agent.is_none() {
        cfg.policy_candidates = 0;
    }
    cem_optimize(&obj, &cfg, a_max, warm_start)
}

/// CEM-MPC without terminal value or policy candidates.
pub fn pure_mpc_plan(model: &DynamicsModel, s0: &State, cfg: &CemConfig, warm_start: Option<&[f64]>) -> Result<Plan> {
    let cfg = CemConfig {
        policy_candidates: 0,
        use_terminal_q: false,
        ..cfg.clone()
    };
    cem_plan(model, s0, &cfg, None, warm_start)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::Td3Config;
    use crate::model::ModelKind;
    use crate::pendulum::{step_prior_substeps, PhysicalParams};

    fn zero_model() -> DynamicsModel {
        DynamicsModel::zero(ModelKind::ResidualPhysics, PhysicalParams::default(), 0.02, 4)
    }

    #[test]
    fn single_step_is_immediate_reward() {
        let m = zero_model();
        let s = State::new(0.2, 1.0, 0.5, -1.0);
        let v = evaluate_sequence(&m, &s, &[2.0], 0.99, None, false);
        assert_eq!(v, reward(&s, 2.0, 6.0));
    }

    #[test]
    fn zero_discount_keeps_first_reward() {
        let m = zero_model();
        let s = State::new(0.2, 1.0, 0.5, -1.0);
        let v = evaluate_sequence(&m, &s, &[2.0, -1.0, 3.0, 0.5], 0.0, None, false);
        assert_eq!(v, reward(&s, 2.0, 6.0));
    }

    #[test]
    fn three_step_hand_rollout() {
        let m = zero_model();
        let agent = ActorCritic::zeroed(Td3Config::for_voltage_limit(6.0), 6.0, 0).unwrap();
        let p = PhysicalParams::default();
        let s0 = State::new(0.1, 0.5, 0.0, 1.0);
        let acts = [3.0, -2.0, 1.0];
        let g: f64 = 0.9;
        let mut s = s0;
        let mut expected = 0.0;
        for (t, &a) in acts.iter().enumerate() {
            expected += g.powi(t as i32) * reward(&s, a, 6.0);
            s = step_prior_substeps(&s, a, 0.02, 4, &p);
        }
        let v = evaluate_sequence(&m, &s0, &acts, g, Some(&agent), true);
        assert!((v - expected).abs() < 1e-14, "{v} vs {expected}");
    }

    #[test]
    fn terminal_rollouts_are_penalized_and_truncated() {
        let m = zero_model();
        // Rotor already at the edge and moving out fast.
        let s0 = State::new(3.1, 0.0, 20.0, 0.0);
        let v = evaluate_sequence(&m, &s0, &[0.0, 0.0, 0.0], 1.0, None, false);
        let r0 = reward(&s0, 0.0, 6.0);
        assert!((v - (r0 - 1.0)).abs() < 1e-12, "{v}");
    }

    struct Quadratic(Vec<f64>);

    impl SequenceObjective for Quadratic {
        fn score(&self, seqs: &[f64], h: usize) -> Vec<f64> {
            seqs.chunks(h)
                .map(|row| -row.iter().zip(&self.0).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
                .collect()
        }
    }

    #[test]
    fn cem_finds_quadratic_optimum() {
        let target = vec![2.0, -1.5, 0.3, 4.0, -5.0];
        let cfg = CemConfig {
            iterations: 10,
            population: 200,
            policy_candidates: 0,
            elite_count: 20,
            horizon: 5,
            seed: 5,
            ..CemConfig::hybrid(6.0)
        };
        let plan = cem_optimize(&Quadratic(target.clone()), &cfg, 6.0, None).unwrap();
        for (a, b) in plan.actions.iter().zip(&target) {
            assert!((a - b).abs() < 0.3, "{:?}", plan.actions);
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let base = CemConfig::hybrid(6.0);
        for cfg in [
            CemConfig { iterations: 0, ..base.clone() },
            CemConfig { elite_count: 0, ..base.clone() },
            CemConfig { elite_count: 501, ..base.clone() },
            CemConfig { policy_candidates: 600, ..base.clone() },
            CemConfig { min_std: 0.0, ..base.clone() },
        ] {
            assert!(cem_plan(&zero_model(), &State::default(), &cfg, None, None).is_err());
        }
    }

    #[test]
    fn plans_respect_voltage_limit() {
        let cfg = CemConfig {
            population: 100,
            elite_count: 10,
            init_std: 20.0,
            ..CemConfig::hybrid(6.0)
        };
        let plan = cem_plan(&zero_model(), &State::new(0.0, 0.1, 0.0, 0.0), &cfg, None, None).unwrap();
        assert!(plan.actions.iter().all(|a| a.abs() <= 6.0));
        assert!(plan.predicted_return.is_finite());
    }
}
