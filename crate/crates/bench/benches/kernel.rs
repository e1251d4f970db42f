use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ndssm_bench::kernel_spec;
use ndssm_core::ndkernel::assemble_factored;
use ndssm_core::resolution::{rescale_delta, ResolutionPlan};
use ndssm_core::Cutoff;

fn assembly(c: &mut Criterion) {
    let mut group = c.benchmark_group("assemble_factored");
    for (dims, side) in [(1, 1024), (2, 32), (2, 128), (3, 16)] {
        let spec = kernel_spec(dims, side, 64);
        let id = format!("{dims}d_{side}");
        group.bench_with_input(BenchmarkId::new("full", &id), &spec, |b, s| {
            b.iter(|| assemble_factored(black_box(s), Cutoff::INFINITE).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("alpha_0.5", &id), &spec, |b, s| {
            b.iter(|| assemble_factored(black_box(s), Cutoff::new(0.5).unwrap()).unwrap())
        });
    }
    let spec = kernel_spec(2, 32, 64);
    let plan = ResolutionPlan::new(&[32, 32], &[128, 128]).unwrap();
    group.bench_function("rescale_then_assemble_32_to_128", |b| {
        b.iter(|| {
            assemble_factored(&rescale_delta(black_box(&spec), &plan).unwrap(), Cutoff::new(0.5).unwrap()).unwrap()
        })
    });
    group.finish();
}

criterion_group!(benches, assembly);
criterion_main!(benches);
