//! Criterion benchmarks for the hot paths: GEMM-backed tensor ops, one PGD
//! step on a small residual network, and a gradient-boosted tree fit.

use std::hint::black_box;

use criterion::{BenchmarkId, Criterion, Throughput};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use robustlab::attacks::pgd;
use robustlab::config_predictor::{fit_gbr, GbrParams};
use robustlab::tensor::Tape;
use robustlab::{ArchSpec, AttackConfig, Model, Tensor};

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

pub fn tensor_ops(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut group = c.benchmark_group("matmul");
    for n in [32, 128] {
        let a = uniform(&mut rng, &[n, n], -1.0, 1.0);
        let b = uniform(&mut rng, &[n, n], -1.0, 1.0);
        group.throughput(Throughput::Elements((2 * n * n * n) as u64));
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let mut tape = Tape::new();
                let (va, vb) = (tape.leaf(a.clone(), false), tape.leaf(b.clone(), false));
                black_box(tape.matmul(va, vb).unwrap());
            })
        });
    }
    group.finish();

    let x = uniform(&mut rng, &[16, 16, 8, 8], -1.0, 1.0);
    let w = uniform(&mut rng, &[16, 16, 3, 3], -1.0, 1.0);
    c.bench_function("conv2d forward+backward 16x16x8x8", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let vx = tape.leaf(x.clone(), true);
            let vw = tape.leaf(w.clone(), true);
            let out = tape.conv2d(vx, vw, 1, 1).unwrap();
            let loss = tape.sum(out);
            black_box(tape.backward(loss).unwrap());
        })
    });
}

pub fn attack_step(c: &mut Criterion) {
    let arch = ArchSpec::wrn(10, 1, [1, 8, 8], 2);
    let model = Model::build(&arch, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = uniform(&mut rng, &[64, 1, 8, 8], 0.0, 1.0);
    let y: Vec<usize> = (0..64).map(|i| i % 2).collect();
    let cfg = AttackConfig::pgd(8.0 / 255.0, 1);
    c.bench_function("pgd step wrn-10-1 batch 64", |bench| {
        bench.iter(|| black_box(pgd(&model, &x, &y, &cfg, None, 0).unwrap()))
    });
}

pub fn gbr_fit(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x: Vec<Vec<f64>> = (0..200).map(|_| (0..6).map(|_| rng.random_range(0.0..10.0)).collect()).collect();
    let y: Vec<f64> = x.iter().map(|r| 2.0 * r[0] + r[3] * r[5] + rng.random_range(-1.0..1.0)).collect();
    c.bench_function("gbr fit 200x6", |bench| {
        bench.iter(|| black_box(fit_gbr(&x, &y, &GbrParams::default()).unwrap()))
    });
}
