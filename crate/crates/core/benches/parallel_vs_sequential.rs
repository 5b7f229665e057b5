//! Rayon's default pool against a single-thread pool on the hot paths.
//!
//! Results are bit-identical either way (see `par`), so only time differs.
//! Build with `--no-default-features` to bench the plain sequential code.

use bcat_core::dataio::{gen_shifted_shapes, ShiftParams};
use bcat_core::tensor::kernels;
use bcat_core::train::{train_bcat, TrainConfig};
use bcat_core::Tensor;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

fn pools() -> Vec<(&'static str, rayon::ThreadPool)> {
    let default = rayon::ThreadPoolBuilder::new().build().unwrap();
    let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    vec![("rayon", default), ("sequential", single)]
}

fn bench_matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul_512x64x512");
    let a = Tensor::new(vec![512, 64], (0..512 * 64).map(|i| (i % 7) as f64 * 0.1).collect()).unwrap();
    let b = Tensor::new(vec![64, 512], (0..64 * 512).map(|i| (i % 5) as f64 * 0.2).collect()).unwrap();
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::from_parameter(name), |bench| {
            pool.install(|| bench.iter(|| kernels::matmul(black_box(&a), black_box(&b)).unwrap()))
        });
    }
    group.finish();
}

fn bench_generation(c: &mut Criterion) {
    let mut group = c.benchmark_group("gen_shifted_shapes_2048");
    let shift = ShiftParams::target();
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::from_parameter(name), |bench| {
            pool.install(|| bench.iter(|| gen_shifted_shapes(2048, black_box(&shift), 7).unwrap()))
        });
    }
    group.finish();
}

fn bench_training_epoch(c: &mut Criterion) {
    let mut group = c.benchmark_group("train_epoch_128");
    group.sample_size(10);
    let source = gen_shifted_shapes(128, &ShiftParams::source(), 1).unwrap();
    let target = gen_shifted_shapes(128, &ShiftParams::target(), 2).unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        ..TrainConfig::default()
    };
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::from_parameter(name), |bench| {
            pool.install(|| bench.iter(|| train_bcat(&source, &target, black_box(&cfg)).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_matmul, bench_generation, bench_training_epoch);
criterion_main!(benches);
