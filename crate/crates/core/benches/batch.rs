use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dealer_core::sim::{mm_for, run_batch, run_batch_sequential, SimConfig};
use dealer_core::MarketMakerConfig;

fn batches(c: &mut Criterion) {
    let mut group = c.benchmark_group("batch");
    group.sample_size(10);
    for (name, mm) in [
        ("lmsr", MarketMakerConfig::lmsr(125.0)),
        ("bmm", mm_for("bmm", 125.0, 5, 1.0, 5.0).unwrap()),
    ] {
        let config = SimConfig {
            mm,
            seed: 7,
            ..SimConfig::default()
        };
        let runs = 32;
        group.bench_with_input(BenchmarkId::new("parallel", name), &runs, |b, &runs| {
            b.iter(|| run_batch(black_box(&config), runs).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("sequential", name), &runs, |b, &runs| {
            b.iter(|| run_batch_sequential(black_box(&config), runs).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, batches);
criterion_main!(benches);
