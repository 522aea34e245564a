use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ctf_core::bench::{SyntheticSetup, DEFAULT_MAX_GALLERY_BYTES};
use ctf_core::cascade::{search_parallel, search_sequential, SearchMode};

fn batch_queries(c: &mut Criterion) {
    let setup = SyntheticSetup::new(20_000, 64, 1, DEFAULT_MAX_GALLERY_BYTES).unwrap();
    let thresholds = setup.calibrate(2.0).unwrap();
    let modes = [
        ("ctf", SearchMode::Cascade(thresholds)),
        (
            "full_2048",
            SearchMode::Full {
                level: setup.longest_level(),
            },
        ),
    ];
    let mut group = c.benchmark_group("batch_64_queries");
    group.sample_size(10);
    for (name, mode) in &modes {
        group.bench_with_input(BenchmarkId::new("sequential", name), mode, |b, mode| {
            b.iter(|| black_box(search_sequential(&setup.queries, &setup.gallery, mode).unwrap()))
        });
        group.bench_with_input(BenchmarkId::new("parallel", name), mode, |b, mode| {
            b.iter(|| black_box(search_parallel(&setup.queries, &setup.gallery, mode).unwrap()))
        });
    }
    group.finish();
}

fn calibration(c: &mut Criterion) {
    let setup = SyntheticSetup::new(2_000, 10, 2, DEFAULT_MAX_GALLERY_BYTES).unwrap();
    c.bench_function("calibrate_beta_2", |b| {
        b.iter(|| black_box(setup.calibrate(2.0).unwrap()))
    });
}

criterion_group!(benches, batch_queries, calibration);
criterion_main!(benches);
