//! Sequential vs data-parallel kernel comparison. Both code paths produce
//! bitwise-identical results (asserted in the kernel unit tests); these
//! benches measure what the parallel feature buys at different sizes,
//! including ones below the dispatch thresholds where rayon would lose.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use platedvi::tensor::kernels;
use platedvi::{Rng, Tensor};

fn filled(n: usize, seed: u64) -> Vec<f64> {
    Rng::from_seed(seed).standard_normal_vec(n)
}

fn bench_map(c: &mut Criterion) {
    let mut group = c.benchmark_group("map_exp");
    group.sample_size(30);
    for &n in &[4_096usize, 65_536, 1_048_576] {
        let src = filled(n, 1);
        group.throughput(Throughput::Elements(n as u64));
        group.bench_with_input(BenchmarkId::new("seq", n), &src, |b, s| {
            b.iter(|| kernels::map_seq(s, f64::exp))
        });
        group.bench_with_input(BenchmarkId::new("par", n), &src, |b, s| {
            b.iter(|| kernels::map_par(s, f64::exp))
        });
    }
    group.finish();
}

fn bench_zip_broadcast(c: &mut Criterion) {
    let mut group = c.benchmark_group("zip_broadcast_add");
    group.sample_size(30);
    for &(rows, cols) in &[(256usize, 256usize), (1_024, 512)] {
        let a = filled(rows * cols, 2);
        let b_row = filled(cols, 3);
        let a_shape = vec![rows, cols];
        let b_shape = vec![cols];
        let out_shape = vec![rows, cols];
        let label = format!("{rows}x{cols}");
        group.throughput(Throughput::Elements((rows * cols) as u64));
        group.bench_with_input(BenchmarkId::new("seq", &label), &(), |bench, _| {
            bench.iter(|| {
                kernels::zip_broadcast_seq(&a, &a_shape, &b_row, &b_shape, &out_shape, |x, y| {
                    x + y
                })
            })
        });
        group.bench_with_input(BenchmarkId::new("par", &label), &(), |bench, _| {
            bench.iter(|| {
                kernels::zip_broadcast_par(&a, &a_shape, &b_row, &b_shape, &out_shape, |x, y| {
                    x + y
                })
            })
        });
    }
    group.finish();
}

fn bench_matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    group.sample_size(20);
    for &n in &[32usize, 96, 192] {
        let a = filled(n * n, 4);
        let b = filled(n * n, 5);
        group.throughput(Throughput::Elements((n * n * n) as u64));
        group.bench_with_input(BenchmarkId::new("seq", n), &(), |bench, _| {
            bench.iter(|| kernels::matmul_nn_seq(&a, &b, n, n, n))
        });
        group.bench_with_input(BenchmarkId::new("par", n), &(), |bench, _| {
            bench.iter(|| kernels::matmul_nn_par(&a, &b, n, n, n))
        });
    }
    group.finish();
}

/// End to end through the tape: forward + backward of a dense stack, using
/// whichever kernel path the size-based dispatch selects.
fn bench_tape_backward(c: &mut Criterion) {
    let mut group = c.benchmark_group("tape_dense_backward");
    group.sample_size(20);
    for &batch in &[32usize, 256] {
        let x = Tensor::from_vec(vec![batch, 64], filled(batch * 64, 6)).unwrap();
        let w1 = Tensor::from_vec(vec![64, 128], filled(64 * 128, 7)).unwrap();
        let w2 = Tensor::from_vec(vec![128, 16], filled(128 * 16, 8)).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(batch), &(), |bench, _| {
            bench.iter(|| {
                let tape = platedvi::Tape::new();
                let w1 = tape.watch(&w1);
                let w2 = tape.watch(&w2);
                let loss = x
                    .matmul(&w1)
                    .unwrap()
                    .tanh()
                    .matmul(&w2)
                    .unwrap()
                    .square()
                    .mean();
                tape.backward(&loss).unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(
    benches,
    bench_map,
    bench_zip_broadcast,
    bench_matmul,
    bench_tape_backward
);
criterion_main!(benches);
