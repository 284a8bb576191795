use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use fedfair_core::federated::{run_round, FederatedConfig, FederatedState};
use fedfair_core::gnn::{loss_and_gradient, GnnConfig, GnnModel, Sample};
use fedfair_core::network::fixtures::desk_grid;
use fedfair_core::par::Exec;
use fedfair_core::sim::{observation_corpus, ScenarioConfig};

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn gradient(c: &mut Criterion) {
    let f = desk_grid(1);
    let clients = observation_corpus(&f, &ScenarioConfig::default(), 1, 16, 1).unwrap();
    let batch: Vec<&Sample> = clients[0].samples.iter().collect();
    let model = GnnModel::init(GnnConfig::for_network(&f.net, 64), 1);
    let mut group = c.benchmark_group("loss_and_gradient");
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| loss_and_gradient(black_box(&model), &f.net, &batch, None, exec).unwrap())
        });
    }
    group.finish();
}

fn round(c: &mut Criterion) {
    let f = desk_grid(1);
    let cfg = FederatedConfig::default();
    let clients = observation_corpus(&f, &ScenarioConfig::default(), cfg.num_clients, 12, 1).unwrap();
    let model = GnnModel::init(GnnConfig::for_network(&f.net, 64), 1);
    let mut group = c.benchmark_group("run_round");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| {
                let mut state = FederatedState::new(model.clone(), &cfg).unwrap();
                run_round(&mut state, &clients, &f.net, &cfg, 0, 1, exec).unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, gradient, round);
criterion_main!(benches);
