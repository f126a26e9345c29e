//! Data-parallel kernels against a single worker.
//!
//! Every benchmark runs twice: inside the default rayon pool ("pool") and
//! inside a one-thread pool ("sequential"). Building with
//! `--no-default-features` removes rayon and runs the plain loops instead,
//! so `cargo bench --no-default-features` gives the fallback's numbers.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use glims::engine::sliding_window;
use glims::loss::{deep_supervision, LossOptions};
use glims::model::{GlimsModel, ModelConfig};
use glims::params::{Init, ParamStore};
use glims::swin::SwinBlock;
use glims::tensor::Conv3dOptions;
use glims::{par, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn modes() -> [(&'static str, usize); 2] {
    [("pool", 0), ("sequential", 1)]
}

fn randn(shape: &[usize], seed: u64) -> Tensor<f32> {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn conv(c: &mut Criterion) {
    let mut g = c.benchmark_group("conv3d");
    g.sample_size(10);
    let x = randn(&[1, 16, 32, 32, 32], 1);
    let depthwise = randn(&[16, 1, 3, 3, 3], 2);
    let dense = randn(&[32, 16, 1, 1, 1], 3);
    // `Var` is not `Send`, so constants are wrapped inside each pool
    let run = |b: &mut criterion::Bencher, weight: &Tensor<f32>, opts: Conv3dOptions| {
        let (x, w) = (Var::constant(x.clone()), Var::constant(weight.clone()));
        b.iter(|| black_box(x.conv3d(&w, None, opts).unwrap()))
    };
    for (mode, threads) in modes() {
        g.bench_function(BenchmarkId::new("depthwise_dilated", mode), |b| {
            par::with_threads(threads, || run(b, &depthwise, Conv3dOptions::depthwise(16, 2)))
        });
        g.bench_function(BenchmarkId::new("pointwise", mode), |b| {
            par::with_threads(threads, || run(b, &dense, Conv3dOptions::default()))
        });
    }
    g.finish();
}

fn attention(c: &mut Criterion) {
    let mut g = c.benchmark_group("swin_block");
    g.sample_size(10);
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let block = SwinBlock::new(&mut Init::new(&mut store, &mut rng).scope("b"), 64, 2, 7, 4, true);
    let x = randn(&[2, 64, 8, 8, 8], 5);
    for (mode, threads) in modes() {
        g.bench_function(BenchmarkId::new("shifted_forward", mode), |b| {
            par::with_threads(threads, || {
                let (p, x) = (store.constants(), Var::constant(x.clone()));
                b.iter(|| black_box(block.forward(&p, &x).unwrap()))
            })
        });
    }
    g.finish();
}

fn training_step(c: &mut Criterion) {
    let mut g = c.benchmark_group("model");
    g.sample_size(10);
    let config = ModelConfig::reduced();
    let model = GlimsModel::build(&config, 0).unwrap();
    let s = config.patch_size;
    let x = randn(&[2, config.in_channels, s, s, s], 6);
    let labels: Vec<u8> = (0..2 * s * s * s).map(|i| (i % 4) as u8).collect();
    for (mode, threads) in modes() {
        g.bench_function(BenchmarkId::new("forward_backward", mode), |b| {
            par::with_threads(threads, || {
                b.iter(|| {
                    let (_tape, bound) = model.bind();
                    let out = model.forward(&bound, &Var::constant(x.clone())).unwrap();
                    let (loss, _) = deep_supervision(&out.levels(), &labels, LossOptions::default()).unwrap();
                    black_box(loss.backward().unwrap())
                })
            })
        });
    }
    let volume = randn(&[1, config.in_channels, 48, 40, 48], 7);
    for (mode, threads) in modes() {
        g.bench_function(BenchmarkId::new("sliding_window", mode), |b| {
            par::with_threads(threads, || {
                b.iter(|| black_box(sliding_window(&model, &volume, 0.5).unwrap()))
            })
        });
    }
    g.finish();
}

criterion_group!(benches, conv, attention, training_step);
criterion_main!(benches);
