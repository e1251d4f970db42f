use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ndssm_bench::{batch, model};

fn train_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("train_step");
    group.sample_size(10);
    for side in [8, 16, 32] {
        let m = model(side, 16, 2);
        let (images, labels) = batch(32, side, m.config.classes);
        group.bench_with_input(BenchmarkId::new("forward_backward", side), &side, |b, _| {
            b.iter(|| {
                let tape = m.forward_tape(black_box(&images), true).unwrap();
                m.backward(&tape, &labels).unwrap()
            })
        });
        group.bench_with_input(BenchmarkId::new("forward", side), &side, |b, _| {
            b.iter(|| m.forward(black_box(&images)).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, train_step);
criterion_main!(benches);
