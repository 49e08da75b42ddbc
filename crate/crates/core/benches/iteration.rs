use std::hint::black_box;

use aggregame::engine::default_init;
use aggregame::ev::{build_default, default_game, desk_run_settings};
use aggregame::{run_algorithm1, GraphSequence, OperatorContext, RunSettings};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn global_map(c: &mut Criterion) {
    let cfg = default_game(&build_default()).unwrap();
    let ctx = OperatorContext::new(&cfg).unwrap();
    let y = default_init(&cfg, 0.01, 1).remove(0);
    let mut group = c.benchmark_group("global map");
    for parallel in [false, true] {
        let label = if parallel { "parallel" } else { "sequential" };
        group.bench_with_input(BenchmarkId::from_parameter(label), &parallel, |b, &p| {
            b.iter(|| ctx.apply_t_global(black_box(&y), &cfg, p).unwrap())
        });
    }
    group.finish();
}

fn coordinator_rounds(c: &mut Criterion) {
    let cfg = default_game(&build_default()).unwrap();
    let seq = GraphSequence::path(cfg.num_populations());
    let init = default_init(&cfg, 0.01, 1);
    let mut group = c.benchmark_group("50 coordinator rounds");
    group.sample_size(10);
    for parallel in [false, true] {
        let settings = RunSettings {
            max_iterations: 50,
            parallel,
            ..desk_run_settings()
        };
        let label = if parallel { "parallel" } else { "sequential" };
        group.bench_with_input(BenchmarkId::from_parameter(label), &settings, |b, s| {
            b.iter(|| run_algorithm1(&cfg, &seq, black_box(&init), s).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, global_map, coordinator_rounds);
criterion_main!(benches);
