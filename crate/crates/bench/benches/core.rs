use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use stft_bench::{desk, randn};
use stft_core::tucker::{dense_bilinear, tucker_fuse, TuckerVars};
use stft_core::{Tape, Trainer};

fn matmul(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul");
    for n in [32, 64, 128] {
        let (a, b) = (randn(&[n, n], 0), randn(&[n, n], 1));
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let mut t = Tape::new();
                let (x, y) = (t.constant(a.clone()), t.constant(b.clone()));
                black_box(t.matmul(x, y).unwrap());
            })
        });
    }
    g.finish();
}

/// Forward and backward through the fusion, factored against dense.
fn fusion(c: &mut Criterion) {
    let (n, d, k) = (64, 64, 64);
    let (r, s) = (randn(&[n, d], 0), randn(&[n, d], 1));
    let dense = randn(&[d, d, k], 2);
    let mut g = c.benchmark_group("fusion");
    g.bench_function("dense", |bench| {
        bench.iter(|| {
            let mut t = Tape::new();
            let (rv, sv, w) = (t.constant(r.clone()), t.constant(s.clone()), t.param(dense.clone()));
            let y = dense_bilinear(&mut t, rv, sv, w).unwrap();
            let l = t.sum(y).unwrap();
            t.backward(l).unwrap();
            black_box(t.grad(w));
        })
    });
    for rank in [8, 16, 32] {
        let core = randn(&[rank, rank, rank], 3);
        let us = randn(&[d, rank], 4);
        let ut = randn(&[d, rank], 5);
        let uk = randn(&[k, rank], 6);
        g.bench_with_input(BenchmarkId::new("tucker", rank), &rank, |bench, _| {
            bench.iter(|| {
                let mut t = Tape::new();
                let (rv, sv) = (t.constant(r.clone()), t.constant(s.clone()));
                let f = TuckerVars {
                    g: t.param(core.clone()),
                    u_s: t.param(us.clone()),
                    u_t: t.param(ut.clone()),
                    u_k: t.param(uk.clone()),
                };
                let y = tucker_fuse(&mut t, rv, sv, &f).unwrap();
                let l = t.sum(y).unwrap();
                t.backward(l).unwrap();
                black_box(t.grad(f.g));
            })
        });
    }
    g.finish();
}

fn training(c: &mut Criterion) {
    let (cfg, data) = desk(8);
    let mut g = c.benchmark_group("desk");
    g.sample_size(10);
    g.bench_function("epoch", |bench| {
        let mut trainer = Trainer::new(&cfg).unwrap();
        bench.iter(|| black_box(trainer.run_epoch(&data).unwrap()))
    });
    g.bench_function("evaluate", |bench| {
        let mut trainer = Trainer::new(&cfg).unwrap();
        bench.iter(|| black_box(trainer.evaluate(&data).unwrap()))
    });
    g.finish();
}

criterion_group!(benches, matmul, fusion, training);
criterion_main!(benches);
