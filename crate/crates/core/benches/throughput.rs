//! Sequential versus data-parallel throughput of the two hot loops.

use cierec::dataset::{chronological_split, generate_synthetic, partition_cold_warm, sample_training_triples, SplitRatios, SyntheticConfig, COLD_BOUNDARY};
use cierec::evaluation::{evaluate_model, Protocol};
use cierec::model::{Model, ModelConfig};
use cierec::par::Exec;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn modes() -> [(&'static str, Exec); 2] {
    [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)]
}

fn bench(c: &mut Criterion) {
    let data = generate_synthetic(&SyntheticConfig::default(), 3).unwrap().to_dataset();
    let split = partition_cold_warm(chronological_split(&data.log, SplitRatios::default()).unwrap(), COLD_BOUNDARY).unwrap();
    let model = Model::new(ModelConfig::default(), split.n_users, split.n_items, data.content.vocab_size, 5).unwrap();
    let triples = sample_training_triples(&split, 1).unwrap();
    let batch = &triples[..256];

    let mut g = c.benchmark_group("batch_grad_256");
    for (name, exec) in modes() {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| model.batch_grad(&data.content, batch, [1.0, 1.0], exec).unwrap())
        });
    }
    g.finish();

    let protocol = Protocol::with_runs(10, 100, 1, 42);
    let mut g = c.benchmark_group("evaluate");
    g.sample_size(10);
    for (name, exec) in modes() {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| evaluate_model(&model, &split, &data.content, &protocol, exec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
