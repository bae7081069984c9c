//! Sequential vs parallel execution of the dense kernels and of a small
//! replicated budget sweep. Build with `--no-default-features` to measure the
//! sequential fallback without rayon at all.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use fair_itr::kernel::{gram_symmetric, KernelSpec};
use fair_itr::simgen::{default_method, replicate, ExperimentConfig};
use fair_itr::Exec;

fn policies() -> [(&'static str, Exec); 2] {
    [("sequential", Exec::sequential()), ("parallel", Exec::parallel(0))]
}

fn bench_gram(c: &mut Criterion) {
    let data = fair_itr::simgen::generate(&ExperimentConfig::new(3, 800, 10)).unwrap();
    let z = data.features();
    let spec = KernelSpec::gaussian(3.0).unwrap();
    let mut group = c.benchmark_group("gram_800");
    for (name, exec) in policies() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| exec.install(|| gram_symmetric(&spec, black_box(&z)).unwrap()))
        });
    }
    group.finish();
}

fn bench_sweep(c: &mut Criterion) {
    let cfg = ExperimentConfig { reps: 4, n_test: 200, ..ExperimentConfig::new(2, 150, 3) };
    let method = default_method(2);
    let grid = [0.02, 0.06, 0.1];
    let mut group = c.benchmark_group("sweep_4x3");
    group.sample_size(10);
    for (name, exec) in policies() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| replicate(black_box(&cfg), &method, &grid, &exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_gram, bench_sweep);
criterion_main!(benches);
