use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use rthcp::agent::{ActorCritic, Td3Config};
use rthcp::model::{DynamicsModel, ModelKind};
use rthcp::parallel::Execution;
use rthcp::pendulum::{PhysicalParams, State};
use rthcp::planner::{cem_plan, CemConfig};

fn cem_scoring(c: &mut Criterion) {
    let p = PhysicalParams::default();
    let model = DynamicsModel::new(ModelKind::ResidualPhysics, p, 0.02, 4, 1).unwrap();
    let agent = ActorCritic::new(Td3Config::for_voltage_limit(p.a_max), p.a_max, 1).unwrap();
    let s = State::new(0.1, 2.5, -1.0, 3.0);
    let mut group = c.benchmark_group("cem_plan");
    group.sample_size(20);
    for (name, execution) in [("parallel", Execution::Parallel), ("sequential", Execution::Sequential)] {
        for population in [100, 500] {
            let cfg = CemConfig {
                population,
                policy_candidates: population / 10,
                execution,
                ..CemConfig::hybrid(p.a_max)
            };
            group.bench_with_input(BenchmarkId::new(name, population), &cfg, |b, cfg| {
                b.iter(|| cem_plan(&model, black_box(&s), cfg, Some(&agent), None).unwrap())
            });
        }
    }
    group.finish();
}

criterion_group!(benches, cem_scoring);
criterion_main!(benches);
