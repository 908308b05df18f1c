//! Batched kernels on a one-thread rayon pool versus the default pool.
//!
//! With `--no-default-features` both variants run the sequential code path,
//! which gives the baseline for the parallel build.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

use softsae::model::{self, forward, Gating};
use softsae::soft_topk::soft_topk_forward;
use softsae::trainer::{train_step, TrainState};
use softsae::TrainConfig;

fn pools() -> Vec<(String, rayon::ThreadPool)> {
    let default_threads = rayon::current_num_threads();
    let mut out = vec![(
        "1-thread".to_string(),
        rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap(),
    )];
    if default_threads > 1 {
        out.push((
            format!("{default_threads}-thread"),
            rayon::ThreadPoolBuilder::new().num_threads(default_threads).build().unwrap(),
        ));
    }
    out
}

fn setup(batch: usize) -> (TrainConfig, model::SaeParams, Array2<f64>) {
    let cfg = TrainConfig::desk();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = Array2::from_shape_fn((batch, cfg.n), |_| rng.random_range(-1.0..1.0));
    let params = model::init_params(cfg.n, cfg.d, cfg.k_max, Array1::zeros(cfg.n).view(), 0).unwrap();
    (cfg, params, x)
}

fn bench_soft_topk(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut group = c.benchmark_group("soft_topk_forward");
    for d in [64usize, 1024, 4096] {
        let z: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
        group.bench_with_input(BenchmarkId::from_parameter(d), &z, |b, z| {
            b.iter(|| soft_topk_forward(black_box(z), 16.3, 1e-2).unwrap())
        });
    }
    group.finish();
}

fn bench_forward(c: &mut Criterion) {
    let (_, params, x) = setup(256);
    let mut group = c.benchmark_group("forward_b256");
    group.sample_size(20);
    for (name, pool) in pools() {
        for (label, gating) in [("soft", Gating::Soft { alpha: 1e-2 }), ("adaptive", Gating::Adaptive)] {
            group.bench_function(BenchmarkId::new(label, &name), |b| {
                b.iter(|| pool.install(|| forward(&params, black_box(x.view()), gating).unwrap()))
            });
        }
    }
    group.finish();
}

fn bench_train_step(c: &mut Criterion) {
    let (cfg, params, x) = setup(cfg_batch());
    let mut group = c.benchmark_group("train_step_desk");
    group.sample_size(10);
    for (name, pool) in pools() {
        let mut state = TrainState::new(params.clone(), &cfg);
        group.bench_function(BenchmarkId::from_parameter(&name), |b| {
            b.iter(|| {
                // Stay in the soft phase so every iteration does the same work.
                state.step = 0;
                pool.install(|| train_step(&mut state, black_box(x.view()), &cfg).unwrap())
            })
        });
    }
    group.finish();
}

fn cfg_batch() -> usize {
    TrainConfig::desk().batch_size
}

criterion_group!(benches, bench_soft_topk, bench_forward, bench_train_step);
criterion_main!(benches);
