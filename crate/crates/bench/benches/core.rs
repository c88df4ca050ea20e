use std::hint::black_box;

use attestfl_core::data::Sample;
use attestfl_core::experiment::preset;
use attestfl_core::model::{self, ModelSpec};
use attestfl_core::protocol::fedavg;
use attestfl_core::LocalUpdate;
use criterion::{criterion_group, criterion_main, Criterion};

fn bench_fedavg(c: &mut Criterion) {
    let updates: Vec<LocalUpdate> = (0..20)
        .map(|i| LocalUpdate {
            worker_id: i,
            iteration: 1,
            weights: (0..500).map(|k| (i * 500 + k) as f64 * 1e-3).collect(),
            malicious: false,
        })
        .collect();
    c.bench_function("fedavg 20x500", |b| {
        b.iter(|| fedavg(black_box(&updates), None).unwrap())
    });
}

fn bench_gradient(c: &mut Criterion) {
    let spec = ModelSpec::default();
    let w = model::init_weights(&spec, 1);
    let batch: Vec<Sample> = (0..32)
        .map(|i| {
            let window = (0..spec.input_window).map(|k| ((i + k) % 17) as f64 / 17.0).collect();
            Sample::new(window, 0.5)
        })
        .collect();
    c.bench_function("lstm gradient batch 32", |b| {
        b.iter(|| model::loss_and_gradient(&spec, black_box(&w), &batch).unwrap())
    });
}

fn bench_round(c: &mut Criterion) {
    let cfg = preset("static-afl1").expect("preset exists");
    c.bench_function("round with all checks", |b| {
        b.iter_batched(
            || cfg.build(0).unwrap(),
            |mut sim| sim.run_round().unwrap(),
            criterion::BatchSize::LargeInput,
        )
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench_fedavg, bench_gradient, bench_round
}
criterion_main!(benches);
