use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use fragdiff_bench::clustered;
use fragdiff_core::diffusion::{
    per_query_state, precompute_truncated, random_walk, solve_full, DEFAULT_ALPHA, DEFAULT_WALK_MAX_ITER,
};
use fragdiff_core::graph::{build_mutual_knn, normalize};
use std::hint::black_box;

fn graph_build(c: &mut Criterion) {
    let mut group = c.benchmark_group("graph_build");
    for n in [200, 500] {
        let set = clustered(n, 32);
        group.bench_with_input(BenchmarkId::from_parameter(2 * n), &set, |b, set| {
            b.iter(|| build_mutual_knn(black_box(set), 50, 3.0).unwrap())
        });
    }
    group.finish();
}

fn solvers(c: &mut Criterion) {
    let set = clustered(200, 32);
    let s = normalize(&build_mutual_knn(&set, 50, 3.0).unwrap());
    let gallery: Vec<usize> = (0..200).collect();
    let f0 = per_query_state(&set, 300, 10, 3.0).unwrap();

    let mut group = c.benchmark_group("solve_one_query");
    group.bench_function("cg", |b| {
        b.iter(|| solve_full(&s, black_box(&f0), &gallery, DEFAULT_ALPHA, 1e-8, 1000).unwrap())
    });
    group.bench_function("iterate", |b| {
        b.iter(|| random_walk(&s, black_box(&f0), &gallery, DEFAULT_ALPHA, 1e-8, DEFAULT_WALK_MAX_ITER).unwrap())
    });
    let table = precompute_truncated(&s, &gallery, DEFAULT_ALPHA, 250).unwrap();
    group.bench_function("truncated", |b| b.iter(|| table.score(black_box(&f0))));
    group.finish();

    let mut group = c.benchmark_group("truncated_precompute");
    group.sample_size(10);
    group.bench_function("T=250", |b| {
        b.iter(|| precompute_truncated(&s, black_box(&gallery), DEFAULT_ALPHA, 250).unwrap())
    });
    group.finish();
}

criterion_group!(benches, graph_build, solvers);
criterion_main!(benches);
