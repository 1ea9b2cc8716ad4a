//! TD3 actor-critic on base pendulum states, plus imagination rollouts
//! through a learned model.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::{DynamicsModel, ReplayBuffer, Transition};
use crate::neural::{Adam, Mlp, OutputActivation};
use crate::pendulum::{is_terminal, reward, State};

pub const STATE_FEATURES: usize = 6;
/// Angular velocities are divided by this before entering the networks.
const VELOCITY_SCALE: f64 = 10.0;

/// Trig encoding shared with the dynamics model, without normalization.
pub fn state_features(s: &State) -> [f64; STATE_FEATURES] {
    let (sa, ca) = s.alpha.sin_cos();
    let (sb, cb) = s.beta.sin_cos();
    [
        ca,
        sa,
        cb,
        sb,
        s.alpha_dot / VELOCITY_SCALE,
        s.beta_dot / VELOCITY_SCALE,
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct Td3Config {
    pub gamma: f64,
    pub tau: f64,
    /// Target-policy smoothing noise std, V.
    pub policy_noise: f64,
    /// Clip on the smoothing noise, V.
    pub noise_clip: f64,
    pub policy_delay: u64,
    /// Exploration noise used when acting in the plant or in imagination, V.
    pub exploration_std: f64,
    pub hidden: Vec<usize>,
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub batch_size: usize,
}

impl Td3Config {
    pub fn for_voltage_limit(a_max: f64) -> Self {
        Self {
            gamma: 0.99,
            tau: 0.005,
            policy_noise: 0.2 * a_max,
            noise_clip: 0.5 * a_max,
            policy_delay: 2,
            exploration_std: 0.1 * a_max,
            hidden: vec![64, 64],
            lr_actor: 3e-4,
            lr_critic: 3e-4,
            batch_size: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParams(m));
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad(format!("gamma must be in (0,1), got {}", self.gamma));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad(format!("tau must be in (0,1], got {}", self.tau));
        }
        if self.policy_delay == 0 || self.batch_size == 0 || self.hidden.is_empty() {
            return bad("policy_delay, batch_size and hidden layers must be non-zero".into());
        }
        if self.policy_noise < 0.0 || self.noise_clip < 0.0 || self.exploration_std < 0.0 {
            return bad("noise parameters must be non-negative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateStats {
    pub critic_loss: f64,
    pub actor_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ActorCritic {
    pub cfg: Td3Config,
    pub a_max: f64,
    pub actor: Mlp,
    pub critic1: Mlp,
    pub critic2: Mlp,
    pub actor_target: Mlp,
    pub critic1_target: Mlp,
    pub critic2_target: Mlp,
    actor_opt: Adam,
    critic1_opt: Adam,
    critic2_opt: Adam,
    updates: u64,
    rng: ChaCha8Rng,
}

fn layer_sizes(input: usize, hidden: &[usize]) -> Vec<usize> {
    let mut v = vec![input];
    v.extend_from_slice(hidden);
    v.push(1);
    v
}

impl ActorCritic {
    pub fn new(cfg: Td3Config, a_max: f64, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let actor = Mlp::init(
            &layer_sizes(STATE_FEATURES, &cfg.hidden),
            OutputActivation::ScaledTanh(a_max),
            seed,
        )?;
        let critic_sizes = layer_sizes(STATE_FEATURES + 1, &cfg.hidden);
        let critic1 = Mlp::init(&critic_sizes, OutputActivation::Identity, seed.wrapping_add(1))?;
        let critic2 = Mlp::init(&critic_sizes, OutputActivation::Identity, seed.wrapping_add(2))?;
        Ok(Self::from_nets(cfg, a_max, actor, critic1, critic2, seed))
    }

    /// All six networks zeroed: acts 0 V and values every state at 0.
    pub fn zeroed(cfg: Td3Config, a_max: f64, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let actor = Mlp::zeros(
            &layer_sizes(STATE_FEATURES, &cfg.hidden),
            OutputActivation::ScaledTanh(a_max),
        )?;
        let critic_sizes = layer_sizes(STATE_FEATURES + 1, &cfg.hidden);
        let critic1 = Mlp::zeros(&critic_sizes, OutputActivation::Identity)?;
        let critic2 = critic1.clone();
        Ok(Self::from_nets(cfg, a_max, actor, critic1, critic2, seed))
    }

    fn from_nets(cfg: Td3Config, a_max: f64, actor: Mlp, critic1: Mlp, critic2: Mlp, seed: u64) -> Self {
        Self {
            actor_opt: Adam::for_net(&actor, cfg.lr_actor),
            critic1_opt: Adam::for_net(&critic1, cfg.lr_critic),
            critic2_opt: Adam::for_net(&critic2, cfg.lr_critic),
            actor_target: actor.clone(),
            critic1_target: critic1.clone(),
            critic2_target: critic2.clone(),
            actor,
            critic1,
            critic2,
            cfg,
            a_max,
            updates: 0,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x7d3_7d3),
        }
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    /// Deterministic policy output for a batch of states.
    pub fn act_batch(&self, states: &[State]) -> Vec<f64> {
        policy_batch(&self.actor, states)
    }

    /// Policy action plus Gaussian exploration noise, clamped to ±a_max.
    pub fn act<R: Rng + ?Sized>(&self, s: &State, exploration_std: f64, rng: &mut R) -> f64 {
        let a = self.act_batch(std::slice::from_ref(s))[0];
        add_noise(a, exploration_std, self.a_max, rng)
    }

    /// Twin-min value. When `actions` is `None` the policy action is used.
    pub fn q_batch(&self, states: &[State], actions: Option<&[f64]>) -> Vec<f64> {
        let owned;
        let actions = match actions {
            Some(a) => a,
            None => {
                owned = self.act_batch(states);
                &owned
            }
        };
        let x = critic_inputs(states, actions, self.a_max);
        let q1 = forward_out(&self.critic1, &x, states.len());
        let q2 = forward_out(&self.critic2, &x, states.len());
        q1.iter().zip(&q2).map(|(a, b)| a.min(*b)).collect()
    }

    pub fn q_value(&self, s: &State, a: Option<f64>) -> f64 {
        let a = a.map(|v| vec![v]);
        self.q_batch(std::slice::from_ref(s), a.as_deref())[0]
    }

    /// Individual critic outputs `(Q₁, Q₂)`.
    pub fn critic_values(&self, s: &State, a: f64) -> (f64, f64) {
        let x = critic_inputs(std::slice::from_ref(s), &[a], self.a_max);
        (
            forward_out(&self.critic1, &x, 1)[0],
            forward_out(&self.critic2, &x, 1)[0],
        )
    }

    /// One TD3 step: both critics every call; actor and Polyak targets every
    /// `policy_delay` calls.
    pub fn update(&mut self, batch: &[Transition]) -> Result<UpdateStats> {
        if batch.is_empty() {
            return Err(Error::InsufficientData {
                needed: 1,
                available: 0,
            });
        }
        let n = batch.len();
        let next_states: Vec<State> = batch.iter().map(|t| t.s_next).collect();
        let states: Vec<State> = batch.iter().map(|t| t.s).collect();
        let actions: Vec<f64> = batch.iter().map(|t| t.a).collect();

        // Smoothed target actions and twin-min targets.
        let mut target_actions = policy_batch(&self.actor_target, &next_states);
        if self.cfg.policy_noise > 0.0 {
            let noise = Normal::new(0.0, self.cfg.policy_noise).unwrap();
            for a in target_actions.iter_mut() {
                let eps: f64 = noise.sample(&mut self.rng);
                let eps = eps.clamp(-self.cfg.noise_clip, self.cfg.noise_clip);
                *a = (*a + eps).clamp(-self.a_max, self.a_max);
            }
        }
        let xt = critic_inputs(&next_states, &target_actions, self.a_max);
        let q1t = forward_out(&self.critic1_target, &xt, n);
        let q2t = forward_out(&self.critic2_target, &xt, n);
        let targets: Vec<f64> = batch
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let bootstrap = if t.done { 0.0 } else { q1t[i].min(q2t[i]) };
                t.r + self.cfg.gamma * bootstrap
            })
            .collect();

        let x = critic_inputs(&states, &actions, self.a_max);
        let l1 = critic_step(&mut self.critic1, &mut self.critic1_opt, &x, &targets)?;
        let l2 = critic_step(&mut self.critic2, &mut self.critic2_opt, &x, &targets)?;
        let critic_loss = 0.5 * (l1 + l2);
        if !critic_loss.is_finite() {
            return Err(Error::Divergence(format!("critic loss became {critic_loss}")));
        }

        self.updates += 1;
        let mut actor_loss = None;
        if self.updates.is_multiple_of(self.cfg.policy_delay) {
            actor_loss = Some(self.actor_step(&states)?);
            let tau = self.cfg.tau;
            self.actor_target.polyak_from(&self.actor, tau);
            self.critic1_target.polyak_from(&self.critic1, tau);
            self.critic2_target.polyak_from(&self.critic2, tau);
        }
        Ok(UpdateStats {
            critic_loss,
            actor_loss,
        })
    }

    /// Deterministic policy gradient through critic 1; returns −mean Q₁.
    fn actor_step(&mut self, states: &[State]) -> Result<f64> {
        let n = states.len();
        let sx = actor_inputs(states);
        let actor_cache = self.actor.forward_batch(&sx, n)?;
        let actions = actor_cache.output().to_vec();
        let x = critic_inputs(states, &actions, self.a_max);
        let critic_cache = self.critic1.forward_batch(&x, n)?;
        let loss = -critic_cache.output().iter().sum::<f64>() / n as f64;
        if !loss.is_finite() {
            return Err(Error::Divergence(format!("actor loss became {loss}")));
        }
        let upstream = vec![-1.0 / n as f64; n];
        let mut scratch = vec![0.0; self.critic1.num_params()];
        let dx = self.critic1.backward_batch(&critic_cache, &upstream, &mut scratch)?;
        let da: Vec<f64> = (0..n)
            .map(|i| dx[i * (STATE_FEATURES + 1) + STATE_FEATURES] / self.a_max)
            .collect();
        let mut grads = vec![0.0; self.actor.num_params()];
        self.actor.backward_batch(&actor_cache, &da, &mut grads)?;
        self.actor_opt.step_net(&mut self.actor, &grads)?;
        Ok(loss)
    }

    /// Polyak-averages every target network toward its live network.
    pub fn soft_update_targets(&mut self, tau: f64) {
        self.actor_target.polyak_from(&self.actor, tau);
        self.critic1_target.polyak_from(&self.critic1, tau);
        self.critic2_target.polyak_from(&self.critic2, tau);
    }

    /// Generates model rollouts from start states drawn out of `real` and
    /// pushes the imagined transitions into `imagined`. Returns how many were
    /// pushed.
    pub fn imagine(
        &mut self,
        model: &DynamicsModel,
        real: &mut ReplayBuffer,
        imagined: &mut ReplayBuffer,
        n_rollouts: usize,
        horizon: usize,
        exploration_std: f64,
    ) -> Result<usize> {
        if real.is_empty() {
            return Err(Error::InsufficientData {
                needed: 1,
                available: 0,
            });
        }
        let mut pushed = 0;
        for _ in 0..n_rollouts {
            let mut s = real.sample_state().expect("non-empty buffer");
            if is_terminal(&s) {
                continue;
            }
            for _ in 0..horizon {
                let base = policy_batch(&self.actor, std::slice::from_ref(&s))[0];
                let a = add_noise(base, exploration_std, self.a_max, &mut self.rng);
                let s_next = model.predict(&s, a)?;
                if !s_next.is_finite() {
                    break;
                }
                let done = is_terminal(&s_next);
                imagined.push(Transition {
                    s,
                    a,
                    r: reward(&s, a, self.a_max),
                    s_next,
                    done,
                });
                pushed += 1;
                if done {
                    break;
                }
                s = s_next;
            }
        }
        Ok(pushed)
    }

    pub fn to_checkpoint(&self) -> String {
        let c = &self.cfg;
        let mut s = String::new();
        let _ = writeln!(s, "actor_critic");
        let _ = writeln!(s, "a_max {:.16e}", self.a_max);
        let _ = writeln!(s, "gamma {:.16e}", c.gamma);
        let _ = writeln!(s, "tau {:.16e}", c.tau);
        let _ = writeln!(s, "policy_noise {:.16e}", c.policy_noise);
        let _ = writeln!(s, "noise_clip {:.16e}", c.noise_clip);
        let _ = writeln!(s, "policy_delay {}", c.policy_delay);
        let _ = writeln!(s, "exploration_std {:.16e}", c.exploration_std);
        let _ = writeln!(s, "lr_actor {:.16e}", c.lr_actor);
        let _ = writeln!(s, "lr_critic {:.16e}", c.lr_critic);
        let _ = writeln!(s, "batch_size {}", c.batch_size);
        let _ = writeln!(s, "updates {}", self.updates);
        for (role, net) in self.roles() {
            let _ = writeln!(s, "role {role}");
            s.push_str(&net.to_checkpoint());
        }
        s
    }

    fn roles(&self) -> [(&'static str, &Mlp); 6] {
        [
            ("actor", &self.actor),
            ("critic1", &self.critic1),
            ("critic2", &self.critic2),
            ("actor_target", &self.actor_target),
            ("critic1_target", &self.critic1_target),
            ("critic2_target", &self.critic2_target),
        ]
    }

    /// Restores networks and hyperparameters; optimizer moments start fresh.
    pub fn from_checkpoint(text: &str, seed: u64) -> Result<Self> {
        let mut lines = text.lines();
        let mut kv = |key: &str| -> Result<String> {
            let line = lines
                .next()
                .ok_or_else(|| Error::Checkpoint(format!("missing '{key}'")))?
                .trim();
            match line.split_once(' ') {
                Some((k, v)) if k == key => Ok(v.to_string()),
                None if line == key => Ok(String::new()),
                _ => Err(Error::Checkpoint(format!("expected '{key}', got '{line}'"))),
            }
        };
        let num = |v: String| -> Result<f64> {
            v.parse().map_err(|e| Error::Checkpoint(format!("'{v}': {e}")))
        };
        let int = |v: String| -> Result<u64> {
            v.parse().map_err(|e| Error::Checkpoint(format!("'{v}': {e}")))
        };
        kv("actor_critic")?;
        let a_max = num(kv("a_max")?)?;
        let gamma = num(kv("gamma")?)?;
        let tau = num(kv("tau")?)?;
        let policy_noise = num(kv("policy_noise")?)?;
        let noise_clip = num(kv("noise_clip")?)?;
        let policy_delay = int(kv("policy_delay")?)?;
        let exploration_std = num(kv("exploration_std")?)?;
        let lr_actor = num(kv("lr_actor")?)?;
        let lr_critic = num(kv("lr_critic")?)?;
        let batch_size = int(kv("batch_size")?)? as usize;
        let updates = int(kv("updates")?)?;
        let mut nets = Vec::with_capacity(6);
        for role in [
            "actor",
            "critic1",
            "critic2",
            "actor_target",
            "critic1_target",
            "critic2_target",
        ] {
            let tag = lines
                .next()
                .ok_or_else(|| Error::Checkpoint(format!("missing role {role}")))?;
            if tag.trim() != format!("role {role}") {
                return Err(Error::Checkpoint(format!("expected role {role}, got '{tag}'")));
            }
            nets.push(Mlp::read_checkpoint(&mut lines)?);
        }
        let hidden = nets[0].sizes()[1..nets[0].sizes().len() - 1].to_vec();
        let cfg = Td3Config {
            gamma,
            tau,
            policy_noise,
            noise_clip,
            policy_delay,
            exploration_std,
            hidden,
            lr_actor,
            lr_critic,
            batch_size,
        };
        let mut it = nets.into_iter();
        let (actor, critic1, critic2) = (it.next().unwrap(), it.next().unwrap(), it.next().unwrap());
        let mut agent = Self::from_nets(cfg, a_max, actor, critic1, critic2, seed);
        agent.actor_target = it.next().unwrap();
        agent.critic1_target = it.next().unwrap();
        agent.critic2_target = it.next().unwrap();
        agent.updates = updates;
        Ok(agent)
    }
}

fn add_noise<R: Rng + ?Sized>(a: f64, std: f64, a_max: f64, rng: &mut R) -> f64 {
    let noise = if std > 0.0 {
        Normal::new(0.0, std).unwrap().sample(rng)
    } else {
        0.0
    };
    (a + noise).clamp(-a_max, a_max)
}

fn actor_inputs(states: &[State]) -> Vec<f64> {
    let mut x = Vec::with_capacity(states.len() * STATE_FEATURES);
    for s in states {
        x.extend_from_slice(&state_features(s));
    }
    x
}

fn critic_inputs(states: &[State], actions: &[f64], a_max: f64) -> Vec<f64> {
    let mut x = Vec::with_capacity(states.len() * (STATE_FEATURES + 1));
    for (s, a) in states.iter().zip(actions) {
        x.extend_from_slice(&state_features(s));
        x.push(a / a_max);
    }
    x
}

fn forward_out(net: &Mlp, x: &[f64], n: usize) -> Vec<f64> {
    net.forward_batch(x, n)
        .expect("inputs are built with the network's input width")
        .output()
        .to_vec()
}

fn policy_batch(actor: &Mlp, states: &[State]) -> Vec<f64> {
    forward_out(actor, &actor_inputs(states), states.len())
}

fn critic_step(net: &mut Mlp, opt: &mut Adam, x: &[f64], targets: &[f64]) -> Result<f64> {
    let n = targets.len();
    let cache = net.forward_batch(x, n)?;
    let mut loss = 0.0;
    let upstream: Vec<f64> = cache
        .output()
        .iter()
        .zip(targets)
        .map(|(q, y)| {
            let e = q - y;
            loss += e * e;
            2.0 * e / n as f64
        })
        .collect();
    let mut grads = vec![0.0; net.num_params()];
    net.backward_batch(&cache, &upstream, &mut grads)?;
    opt.step_net(net, &grads)?;
    Ok(loss / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelKind;
    use crate::pendulum::{step_prior_substeps, PhysicalParams};

    fn cfg() -> Td3Config {
        Td3Config::for_voltage_limit(6.0)
    }

    #[test]
    fn zeroed_agent_acts_zero_and_values_zero() {
        let ag = ActorCritic::zeroed(cfg(), 6.0, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = State::new(0.1, 2.0, 1.0, -3.0);
        assert_eq!(ag.act(&s, 0.0, &mut rng), 0.0);
        assert_eq!(ag.q_value(&s, None), 0.0);
        assert_eq!(ag.q_value(&s, Some(3.0)), 0.0);
    }

    #[test]
    fn act_is_deterministic_without_noise() {
        let ag = ActorCritic::new(cfg(), 6.0, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = State::new(0.5, 1.0, 2.0, -1.0);
        assert_eq!(ag.act(&s, 0.0, &mut rng), ag.act(&s, 0.0, &mut rng));
    }

    #[test]
    fn q_is_min_of_critics() {
        let ag = ActorCritic::new(cfg(), 6.0, 8).unwrap();
        for k in 0..20 {
            let s = State::new(0.1 * k as f64, 0.3 * k as f64, 1.0, -0.5);
            let a = -6.0 + 0.6 * k as f64;
            let (q1, q2) = ag.critic_values(&s, a);
            let q = ag.q_value(&s, Some(a));
            assert_eq!(q, q1.min(q2));
        }
    }

    #[test]
    fn terminal_zero_reward_batch_has_zero_targets() {
        let mut ag = ActorCritic::zeroed(cfg(), 6.0, 0).unwrap();
        let batch: Vec<Transition> = (0..8)
            .map(|k| Transition {
                s: State::new(0.1 * k as f64, 1.0, 0.0, 0.0),
                a: 1.0,
                r: 0.0,
                s_next: State::new(4.0, 1.0, 0.0, 0.0),
                done: true,
            })
            .collect();
        let stats = ag.update(&batch).unwrap();
        assert_eq!(stats.critic_loss, 0.0);
        assert!(stats.actor_loss.is_none());
    }

    #[test]
    fn empty_batch_is_rejected() {
        let mut ag = ActorCritic::new(cfg(), 6.0, 0).unwrap();
        assert!(ag.update(&[]).is_err());
    }

    #[test]
    fn unit_polyak_copies_live_networks() {
        let mut ag = ActorCritic::new(cfg(), 6.0, 0).unwrap();
        ag.actor = Mlp::init(ag.actor.sizes(), ag.actor.output_activation(), 99).unwrap();
        ag.soft_update_targets(1.0);
        assert_eq!(ag.actor_target, ag.actor);
        assert_eq!(ag.critic1_target, ag.critic1);
        assert_eq!(ag.critic2_target, ag.critic2);
    }

    #[test]
    fn imagine_with_zero_residual_follows_prior() {
        let params = PhysicalParams::default();
        let model = DynamicsModel::zero(ModelKind::ResidualPhysics, params, 0.02, 4);
        let mut ag = ActorCritic::zeroed(cfg(), 6.0, 0).unwrap();
        let mut real = ReplayBuffer::new(10, 0);
        let s0 = State::new(0.0, 0.4, 0.0, 0.0);
        real.push(Transition {
            s: s0,
            a: 0.0,
            r: 0.0,
            s_next: s0,
            done: false,
        });
        let mut im = ReplayBuffer::new(10, 0);
        assert_eq!(ag.imagine(&model, &mut real, &mut im, 1, 1, 0.0).unwrap(), 1);
        let t = im.as_slice()[0];
        assert_eq!(t.s, s0);
        assert_eq!(t.s_next, step_prior_substeps(&s0, 0.0, 0.02, 4, &params));

        let mut empty = ReplayBuffer::new(10, 0);
        assert!(ag.imagine(&model, &mut empty, &mut im, 1, 1, 0.0).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut ag = ActorCritic::new(cfg(), 6.0, 3).unwrap();
        ag.critic2_target.params_mut()[0] = 0.1;
        let back = ActorCritic::from_checkpoint(&ag.to_checkpoint(), 3).unwrap();
        assert_eq!(back.actor, ag.actor);
        assert_eq!(back.critic2_target, ag.critic2_target);
        assert_eq!(back.cfg, ag.cfg);
    }
}
