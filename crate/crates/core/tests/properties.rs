//! Property tests for the documented invariants.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rthcp::agent::{ActorCritic, Td3Config};
use rthcp::delayrt::{hanging_start, run_delayed_episode, AugmentedState, DelayConfig, DelayMode};
use rthcp::model::{raw_features, DynamicsModel, ModelKind};
use rthcp::neural::{Mlp, OutputActivation};
use rthcp::parallel::Execution;
use rthcp::pendulum::{
    accelerations, mass_matrix, plant_step, reward, wrap_angle, PhysicalParams, PlantConfig, State,
};
use rthcp::planner::{cem_plan, evaluate_sequence, pure_mpc_plan, CemConfig};

fn state() -> impl Strategy<Value = State> {
    (-3.0..3.0f64, -7.0..7.0f64, -20.0..20.0f64, -30.0..30.0f64)
        .prop_map(|(a, b, ad, bd)| State::new(a, b, ad, bd))
}

fn small_cem(seed: u64) -> CemConfig {
    CemConfig {
        iterations: 2,
        population: 120,
        policy_candidates: 10,
        elite_count: 12,
        seed,
        ..CemConfig::hybrid(6.0)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mass_matrix_is_positive_definite(beta in -10.0..10.0f64) {
        let m = mass_matrix(beta, &PhysicalParams::default());
        let tr = m[0][0] + m[1][1];
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        prop_assert!(det > 0.0 && tr > 0.0);
        prop_assert_eq!(m[0][1], m[1][0]);
    }

    #[test]
    fn reward_is_bounded(s in state(), a in -6.0..6.0f64) {
        let r = reward(&s, a, 6.0);
        prop_assert!((-1.0..=1.0).contains(&r));
    }

    #[test]
    fn wrapped_angles_stay_in_range(x in -100.0..100.0f64) {
        let w = wrap_angle(x);
        prop_assert!(w > -std::f64::consts::PI - 1e-12 && w <= std::f64::consts::PI + 1e-12);
        prop_assert!(((x - w) / (2.0 * std::f64::consts::PI)).fract().abs() < 1e-9
            || ((x - w) / (2.0 * std::f64::consts::PI)).fract().abs() > 1.0 - 1e-9);
    }

    #[test]
    fn plant_step_is_reproducible(s in state(), a in -6.0..6.0f64, seed in any::<u64>()) {
        let cfg = PlantConfig::default();
        let x = plant_step(&s, a, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let y = plant_step(&s, a, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(x, y);
    }

    #[test]
    fn accelerations_are_finite(s in state(), a in -6.0..6.0f64) {
        let (x, y) = accelerations(&s, a, &PhysicalParams::default(), None).unwrap();
        prop_assert!(x.is_finite() && y.is_finite());
    }

    #[test]
    fn forward_is_pure(seed in any::<u64>(), x in prop::collection::vec(-3.0..3.0f64, 5)) {
        let net = Mlp::init(&[5, 7, 3], OutputActivation::ScaledTanh(2.0), seed).unwrap();
        let a = net.forward(&x).unwrap();
        let b = net.forward(&x).unwrap();
        prop_assert!(a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits()));
        prop_assert!(a.iter().all(|v| v.abs() <= 2.0));
    }

    #[test]
    fn checkpoints_round_trip_bit_exactly(seed in any::<u64>()) {
        let net = Mlp::init(&[3, 4, 2], OutputActivation::Identity, seed).unwrap();
        let back = Mlp::from_checkpoint(&net.to_checkpoint()).unwrap();
        prop_assert!(net.params().iter().zip(back.params()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn actions_are_bounded(seed in 0u64..1000, s in state()) {
        let agent = ActorCritic::new(Td3Config::for_voltage_limit(6.0), 6.0, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        prop_assert!(agent.act(&s, 3.0, &mut rng).abs() <= 6.0);
        prop_assert!(agent.act(&s, 0.0, &mut rng).abs() <= 6.0);
    }

    #[test]
    fn q_value_is_twin_min(seed in 0u64..1000, s in state(), a in -6.0..6.0f64) {
        let agent = ActorCritic::new(Td3Config::for_voltage_limit(6.0), 6.0, seed).unwrap();
        let (q1, q2) = agent.critic_values(&s, a);
        prop_assert_eq!(agent.q_value(&s, Some(a)), q1.min(q2));
    }

    #[test]
    fn features_are_periodic_in_alpha(s in state(), a in -6.0..6.0f64) {
        let f = raw_features(&s, a);
        let g = raw_features(&State { alpha: s.alpha + 2.0 * std::f64::consts::PI, ..s }, a);
        for i in 0..4 {
            prop_assert!((f[i] - g[i]).abs() < 1e-12);
        }
        prop_assert_eq!(&f[4..], &g[4..]);
    }

    #[test]
    fn zero_residual_is_bitwise_prior(s in state(), a in -6.0..6.0f64) {
        let p = PhysicalParams::default();
        let m = DynamicsModel::zero(ModelKind::ResidualPhysics, p, 0.02, 4);
        let prior = rthcp::pendulum::step_prior_substeps(&s, a, 0.02, 4, &p);
        prop_assert_eq!(m.predict(&s, a).unwrap(), prior);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn plans_are_seed_deterministic_and_bounded(seed in any::<u64>(), s in state()) {
        let p = PhysicalParams::default();
        let model = DynamicsModel::zero(ModelKind::ResidualPhysics, p, 0.02, 4);
        let agent = ActorCritic::new(Td3Config::for_voltage_limit(6.0), 6.0, seed).unwrap();
        let cfg = small_cem(seed);
        let a = cem_plan(&model, &s, &cfg, Some(&agent), None).unwrap();
        let b = cem_plan(&model, &s, &cfg, Some(&agent), None).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert!(a.actions.iter().all(|x| x.abs() <= 6.0));
        prop_assert!(a.predicted_return.is_finite());
    }

    #[test]
    fn parallel_and_sequential_scoring_agree(seed in any::<u64>(), s in state()) {
        let p = PhysicalParams::default();
        let model = DynamicsModel::zero(ModelKind::ResidualPhysics, p, 0.02, 4);
        let agent = ActorCritic::new(Td3Config::for_voltage_limit(6.0), 6.0, seed).unwrap();
        let par = CemConfig { execution: Execution::Parallel, ..small_cem(seed) };
        let seq = CemConfig { execution: Execution::Sequential, ..small_cem(seed) };
        prop_assert_eq!(
            cem_plan(&model, &s, &par, Some(&agent), None).unwrap(),
            cem_plan(&model, &s, &seq, Some(&agent), None).unwrap()
        );
    }

    #[test]
    fn hybrid_reduces_to_plain_mpc(seed in any::<u64>(), s in state()) {
        let p = PhysicalParams::default();
        let model = DynamicsModel::zero(ModelKind::ResidualPhysics, p, 0.02, 4);
        let agent = ActorCritic::new(Td3Config::for_voltage_limit(6.0), 6.0, seed).unwrap();
        let cfg = CemConfig { use_terminal_q: false, policy_candidates: 0, ..small_cem(seed) };
        prop_assert_eq!(
            cem_plan(&model, &s, &cfg, Some(&agent), None).unwrap(),
            pure_mpc_plan(&model, &s, &cfg, None).unwrap()
        );
    }

    #[test]
    fn delayed_loop_never_has_gaps(d in 0usize..4, extra in 0usize..3, seed in 0u64..100) {
        let plant = PlantConfig::default();
        let h_e = d.max(1) + extra;
        let delay = DelayConfig {
            dt: plant.dt,
            horizon_p: h_e + 1,
            horizon_e: h_e,
            mode: DelayMode::Fixed(d),
            budget_check: true,
        };
        let mut c = |_: &AugmentedState, _: &[f64], s: u64| Ok(vec![((s % 7) as f64 - 3.0) * 0.5; 8]);
        let log = run_delayed_episode(&plant, &mut c, &delay, hanging_start(seed), 60, seed).unwrap();
        prop_assert_eq!(log.gaps, 0);
        prop_assert!(log.records.len() == 60 || log.records.last().unwrap().done);
        for (k, r) in log.records.iter().enumerate() {
            prop_assert_eq!(r.tick, k);
        }
    }
}

#[test]
fn plan_never_scores_below_warm_start() {
    let p = PhysicalParams::default();
    let model = DynamicsModel::zero(ModelKind::ResidualPhysics, p, 0.02, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    use rand::Rng;
    for k in 0..100u64 {
        let agent = ActorCritic::new(Td3Config::for_voltage_limit(6.0), 6.0, k).unwrap();
        let s = State::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-3.0..3.0),
            rng.gen_range(-5.0..5.0),
            rng.gen_range(-5.0..5.0),
        );
        let warm: Vec<f64> = (0..5).map(|_| rng.gen_range(-6.0..6.0)).collect();
        let cfg = CemConfig {
            iterations: 2,
            population: 40,
            policy_candidates: 5,
            elite_count: 5,
            seed: k,
            ..CemConfig::hybrid(6.0)
        };
        let plan = cem_plan(&model, &s, &cfg, Some(&agent), Some(&warm)).unwrap();
        let score = |a: &[f64]| evaluate_sequence(&model, &s, a, cfg.gamma, Some(&agent), true);
        assert!(score(&plan.actions) >= score(&warm), "instance {k}");
    }
}
