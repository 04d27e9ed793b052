//! Benchmarks for the three pipeline stages that dominate wall time:
//! Gram assembly, the full sample-and-fit path, and per-point evaluation
//! of a fitted model.

use std::time::Duration;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use hamlearn::estimator::assemble_gram;
use hamlearn::experiments::{build_kernel, preset, run_fit, sample_test_points};

fn bench_gram_assembly(c: &mut Criterion) {
    let cfg = preset("rigid_body").unwrap();
    let system = cfg.system.build().unwrap();
    let kernel = build_kernel(cfg.kernel, &system, cfg.eta_grid[0]).unwrap();
    let mut group = c.benchmark_group("gram_assembly");
    for n in [50usize, 100, 200] {
        let pts = sample_test_points(&cfg, &system, n, "bench-gram").unwrap();
        group.bench_with_input(BenchmarkId::new("rigid_body", n), &pts, |b, pts| {
            b.iter(|| assemble_gram(pts, kernel.as_ref(), system.structure()).unwrap());
        });
    }
    group.finish();
}

fn bench_fit(c: &mut Criterion) {
    let mut group = c.benchmark_group("fit");
    group
        .sample_size(10)
        .measurement_time(Duration::from_secs(8));
    for (name, n) in [("rigid_body", 100), ("rigid_body", 200), ("two_vortex", 100)] {
        let mut cfg = preset(name).unwrap();
        cfg.sample_count = n;
        group.bench_function(BenchmarkId::new(name, n), |b| {
            b.iter(|| run_fit(&cfg).unwrap());
        });
    }
    group.finish();
}

fn bench_evaluation(c: &mut Criterion) {
    let mut cfg = preset("rigid_body").unwrap();
    cfg.sample_count = 200;
    let out = run_fit(&cfg).unwrap();
    let pts = sample_test_points(&cfg, &out.system, 64, "bench-eval").unwrap();
    let mut group = c.benchmark_group("evaluate");
    let mut i = 0;
    group.bench_function("hamiltonian_per_point", |b| {
        b.iter(|| {
            i = (i + 1) % pts.len();
            out.estimator.evaluate_h(&pts[i]).unwrap()
        });
    });
    let mut j = 0;
    group.bench_function("field_per_point", |b| {
        b.iter(|| {
            j = (j + 1) % pts.len();
            out.estimator.evaluate_field(&pts[j]).unwrap()
        });
    });
    group.finish();
}

criterion_group!(benches, bench_gram_assembly, bench_fit, bench_evaluation);
criterion_main!(benches);
