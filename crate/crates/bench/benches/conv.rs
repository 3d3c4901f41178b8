use std::hint::black_box;

use cac_core::cac::{cac_forward_hard, cac_forward_soft, CacConvParams};
use cac_core::oracle::conv2d_naive;
use cac_core::tensor::conv2d;
use cac_core::Tensor;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn input(n: usize, c: usize) -> (Tensor<f32>, Tensor<f32>) {
    let x = Tensor::from_fn(&[1, c, n, n], |i| ((i * 7919) % 101) as f32 / 50.0 - 1.0);
    let w = Tensor::from_fn(&[c, c, 3, 3], |i| ((i * 104_729) % 37) as f32 / 18.0 - 1.0);
    (x, w)
}

fn convolutions(cr: &mut Criterion) {
    let mut g = cr.benchmark_group("conv3x3_c16");
    for n in [16, 32] {
        let (x, w) = input(n, 16);
        g.bench_with_input(BenchmarkId::new("im2col", n), &n, |b, _| b.iter(|| conv2d(black_box(&x), &w, 1)));
        g.bench_with_input(BenchmarkId::new("naive", n), &n, |b, _| {
            b.iter(|| conv2d_naive(black_box(&x), &w, 1, None))
        });
        // beta sets the sharp share: -2 keeps few windows sharp, 50 keeps all.
        for beta in [-2.0, 50.0] {
            let p = CacConvParams::new(w.clone()).unwrap().with_gate(1.0, beta);
            g.bench_with_input(BenchmarkId::new(format!("cac_hard_beta{beta}"), n), &n, |b, _| {
                b.iter(|| cac_forward_hard(black_box(&x), &p))
            });
        }
        let p = CacConvParams::new(w.clone()).unwrap();
        g.bench_with_input(BenchmarkId::new("cac_soft", n), &n, |b, _| {
            b.iter(|| cac_forward_soft(black_box(&x), &p))
        });
    }
    g.finish();
}

criterion_group!(benches, convolutions);
criterion_main!(benches);
