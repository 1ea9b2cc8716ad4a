//! Behavioural oracles: optimizers converge, losses fall, replays repeat.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rthcp::agent::{ActorCritic, Td3Config};
use rthcp::delayrt::{
    continue_episode, hanging_start, run_delayed_episode, DecisionRecord, DelayConfig, DelayMode,
    DelayedLoop, MpcController,
};
use rthcp::model::{DynamicsModel, ModelKind, ModelTrainer, ReplayBuffer, Transition};
use rthcp::neural::{Adam, Mlp, OutputActivation};
use rthcp::pendulum::{plant_step, plant_step_with_torque, total_energy, PhysicalParams, PlantConfig, State};
use rthcp::planner::{cem_plan, CemConfig};

fn random_state(rng: &mut ChaCha8Rng) -> State {
    State::new(
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-3.2..3.2),
        rng.gen_range(-8.0..8.0),
        rng.gen_range(-15.0..15.0),
    )
}

#[test]
fn adam_minimizes_a_quadratic() {
    let target = [1.5, -2.0, 0.25, 4.0];
    let mut x = vec![0.0; 4];
    let mut opt = Adam::new(4, 0.05);
    for _ in 0..3000 {
        let g: Vec<f64> = x.iter().zip(&target).map(|(a, b)| 2.0 * (a - b)).collect();
        opt.step(&mut x, &g).unwrap();
    }
    for (a, b) in x.iter().zip(&target) {
        assert!((a - b).abs() < 1e-3, "{a} vs {b}");
    }
}

#[test]
fn mlp_regresses_a_smooth_function() {
    let mut net = Mlp::init(&[1, 16, 16, 1], OutputActivation::Identity, 3).unwrap();
    let mut opt = Adam::for_net(&net, 3e-3);
    let xs: Vec<f64> = (0..64).map(|k| -2.0 + 4.0 * k as f64 / 63.0).collect();
    let loss = |net: &Mlp| {
        xs.iter()
            .map(|&x| (net.forward(&[x]).unwrap()[0] - x.sin()).powi(2))
            .sum::<f64>()
            / xs.len() as f64
    };
    let before = loss(&net);
    for _ in 0..2000 {
        let cache = net.forward_batch(&xs, xs.len()).unwrap();
        let up: Vec<f64> = cache
            .output()
            .iter()
            .zip(&xs)
            .map(|(y, x)| 2.0 * (y - x.sin()) / xs.len() as f64)
            .collect();
        let mut grads = vec![0.0; net.num_params()];
        net.backward_batch(&cache, &up, &mut grads).unwrap();
        opt.step_net(&mut net, &grads).unwrap();
    }
    let after = loss(&net);
    assert!(after < 1e-3 && after < 0.01 * before, "{before} -> {after}");
}

#[test]
fn friction_dissipates_energy() {
    let cfg = PlantConfig {
        torque_noise_std: 0.0,
        ..PlantConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..1000 {
        let s = random_state(&mut rng);
        let next = plant_step_with_torque(&s, 0.0, &cfg, &mut rng).unwrap().next;
        let (e0, e1) = (total_energy(&s, &cfg.params), total_energy(&next, &cfg.params));
        assert!(e1 <= e0 + 1e-9 * e0.abs().max(1e-3), "{e0} -> {e1}");
    }
}

fn prior_data(n: usize, seed: u64) -> ReplayBuffer {
    let cfg = PlantConfig::default().ideal();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut buf = ReplayBuffer::new(n, seed);
    for _ in 0..n {
        let s = random_state(&mut rng);
        let a = rng.gen_range(-6.0..6.0);
        let s_next = plant_step(&s, a, &cfg, &mut rng).unwrap().next;
        buf.push(Transition { s, a, r: 0.0, s_next, done: false });
    }
    buf
}

#[test]
fn residual_model_learns_nothing_from_prior_data() {
    let p = PhysicalParams::default();
    let buf = prior_data(2048, 1);
    let mut m = DynamicsModel::new(ModelKind::ResidualPhysics, p, 0.02, 4, 5).unwrap();
    m.fit_normalizer(&buf);
    let mut tr = ModelTrainer::new(&m, 1e-3, 128, 100, 5);
    let first = m.train_epoch(&buf, &mut tr).unwrap();
    let mut last = first;
    for _ in 0..40 {
        last = m.train_epoch(&buf, &mut tr).unwrap();
    }
    assert!(last < 0.05 * first && last < 1e-4, "{first} -> {last}");
}

#[test]
fn data_driven_loss_falls_over_epochs() {
    let p = PhysicalParams::default();
    let buf = prior_data(2048, 2);
    let mut m = DynamicsModel::new(ModelKind::DataDriven, p, 0.02, 4, 6).unwrap();
    m.fit_normalizer(&buf);
    let mut tr = ModelTrainer::new(&m, 1e-3, 128, 100, 6);
    let losses: Vec<f64> = (0..10).map(|_| m.train_epoch(&buf, &mut tr).unwrap()).collect();
    assert!(losses[9] < 0.5 * losses[0], "{losses:?}");
}

#[test]
fn critic_learns_a_constant_reward() {
    let mut cfg = Td3Config::for_voltage_limit(6.0);
    cfg.gamma = 0.5;
    cfg.lr_critic = 1e-3;
    let mut agent = ActorCritic::new(cfg, 6.0, 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let batch: Vec<Transition> = (0..256)
        .map(|_| {
            let s = random_state(&mut rng);
            Transition {
                s,
                a: rng.gen_range(-6.0..6.0),
                r: 0.5,
                s_next: random_state(&mut rng),
                done: false,
            }
        })
        .collect();
    let mut loss = f64::INFINITY;
    for _ in 0..3000 {
        loss = agent.update(&batch).unwrap().critic_loss;
    }
    assert!(loss < 1e-3, "critic loss {loss}");
    let q = agent.q_value(&batch[0].s, Some(batch[0].a));
    assert!((q - 1.0).abs() < 0.1, "Q = {q}, expected r/(1-gamma) = 1");
}

#[test]
fn replay_from_a_decision_repeats_the_episode() {
    let plant = PlantConfig::default().ideal();
    let model = DynamicsModel::zero(ModelKind::ResidualPhysics, plant.params, plant.dt, 4);
    let delay = DelayConfig {
        dt: plant.dt,
        horizon_p: 5,
        horizon_e: 2,
        mode: DelayMode::Fixed(2),
        budget_check: true,
    };
    let cem = CemConfig {
        iterations: 2,
        population: 60,
        policy_candidates: 0,
        elite_count: 6,
        use_terminal_q: false,
        ..CemConfig::hybrid(6.0)
    };
    let mut ctrl = MpcController { model: &model, cem, action_noise: 0.0 };
    let full = run_delayed_episode(&plant, &mut ctrl, &delay, hanging_start(3), 80, 3).unwrap();
    let pick: &DecisionRecord = &full.decisions[full.decisions.len() / 2];
    let lp = DelayedLoop::from_decision(plant, delay, pick, 3).unwrap();
    let tail = continue_episode(lp, &mut ctrl, 80).unwrap();
    let original = &full.records[pick.tick..];
    assert_eq!(tail.records.len(), original.len());
    for (a, b) in tail.records.iter().zip(original) {
        assert_eq!(a.action.to_bits(), b.action.to_bits());
        assert_eq!(a.next_state, b.next_state);
    }
}

#[test]
fn larger_populations_cost_more() {
    let p = PhysicalParams::default();
    let model = DynamicsModel::zero(ModelKind::ResidualPhysics, p, 0.02, 4);
    let agent = ActorCritic::new(Td3Config::for_voltage_limit(6.0), 6.0, 0).unwrap();
    let s = hanging_start(0);
    let time = |population: usize| {
        let cfg = CemConfig {
            population,
            policy_candidates: 5,
            elite_count: 5,
            ..CemConfig::hybrid(6.0)
        };
        let start = Instant::now();
        for k in 0..5 {
            cem_plan(&model, &s, &CemConfig { seed: k, ..cfg.clone() }, Some(&agent), None).unwrap();
        }
        start.elapsed()
    };
    time(50);
    assert!(time(500) > time(50));
}
