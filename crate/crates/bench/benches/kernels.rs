use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ftcaqr_core::gen::{random_matrix, random_upper_triangular};
use ftcaqr_core::kernels::{apply_qt, combine_qr, householder_qr, pair_update};

fn leaf_qr(c: &mut Criterion) {
    let mut g = c.benchmark_group("householder_qr");
    for (m, n) in [(64, 8), (256, 16), (512, 32)] {
        let a = random_matrix(m, n, 1);
        g.bench_with_input(
            BenchmarkId::from_parameter(format!("{m}x{n}")),
            &a,
            |b, a| b.iter(|| householder_qr(black_box(a)).unwrap()),
        );
    }
    g.finish();
}

fn apply(c: &mut Criterion) {
    let f = householder_qr(&random_matrix(256, 16, 2)).unwrap();
    let x = random_matrix(256, 64, 3);
    c.bench_function("apply_qt 256x16 on 256x64", |b| {
        b.iter(|| apply_qt(black_box(&f), black_box(&x)).unwrap())
    });
}

fn combine(c: &mut Criterion) {
    let mut g = c.benchmark_group("combine");
    for n in [4, 16, 32] {
        let ra = random_upper_triangular(n, 4);
        let rb = random_upper_triangular(n, 5);
        g.bench_with_input(BenchmarkId::new("combine_qr", n), &n, |b, _| {
            b.iter(|| combine_qr(black_box(&ra), black_box(&rb)).unwrap())
        });
        let cf = combine_qr(&ra, &rb).unwrap();
        let c0 = random_matrix(n, 64, 6);
        let c1 = random_matrix(n, 64, 7);
        g.bench_with_input(BenchmarkId::new("pair_update", n), &n, |b, _| {
            b.iter(|| pair_update(black_box(&c0), black_box(&c1), black_box(&cf)).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, leaf_qr, apply, combine);
criterion_main!(benches);
