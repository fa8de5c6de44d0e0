use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use mlh_bench::{random_codes, Workload};
use mlh_core::pack;

fn scan(c: &mut Criterion) {
    let mut group = c.benchmark_group("hamming scan");
    group.sample_size(10);
    for n in [10_000, 100_000] {
        let w = Workload::new(n, 64, 4, 100, 7);
        group.throughput(Throughput::Elements((n * 4) as u64));
        group.bench_with_input(BenchmarkId::new("packed", n), &w, |b, w| {
            b.iter(|| black_box(w.packed()))
        });
        group.bench_with_input(BenchmarkId::new("naive", n), &w, |b, w| {
            b.iter(|| black_box(w.naive()))
        });
    }
    group.finish();
}

fn packing(c: &mut Criterion) {
    let codes = random_codes(3, 100_000, 64);
    c.bench_function("pack 1e5 x 64", |b| b.iter(|| black_box(pack(&codes))));
}

criterion_group!(benches, scan, packing);
criterion_main!(benches);
