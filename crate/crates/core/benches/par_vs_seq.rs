//! Parallel vs single-thread comparison of the batch-parallel hot paths:
//! accuracy evaluation and landscape-grid sweeps.
//!
//! With the `parallel` feature the same workload runs once inside a
//! single-worker rayon pool and once inside an all-cores pool; without it only
//! the sequential fallback exists and is measured directly.

use criterion::{criterion_group, criterion_main, Criterion};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use prunefuse_core::arch::{self, mlp};
use prunefuse_core::dataset::Dataset;
use prunefuse_core::eval::{accuracy, landscape_grid, vectorize};
use prunefuse_core::graph::ModelGraph;

fn synthetic_dataset(examples: usize, features: usize, classes: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Dataset {
        features: (0..examples * features).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        example_shape: vec![features],
        labels: (0..examples).map(|_| rng.gen_range(0..classes)).collect(),
        classes,
    }
}

fn model_and_data() -> (ModelGraph, Dataset) {
    let mut model = mlp(64, &[48, 32], 10).unwrap();
    arch::init_params(&mut model, 9);
    (model, synthetic_dataset(4096, 64, 10, 10))
}

/// Run `f` on one worker and on all cores; without the `parallel` feature the
/// fallback is sequential either way and measured once.
fn for_each_backend(c: &mut Criterion, group: &str, f: impl Fn() + Sync + Send) {
    let mut g = c.benchmark_group(group);
    #[cfg(feature = "parallel")]
    {
        let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let all = rayon::ThreadPoolBuilder::new().build().unwrap();
        g.bench_function("single-thread", |b| b.iter(|| single.install(&f)));
        g.bench_function("all-cores", |b| b.iter(|| all.install(&f)));
    }
    #[cfg(not(feature = "parallel"))]
    g.bench_function("sequential", |b| b.iter(&f));
    g.finish();
}

fn bench_accuracy(c: &mut Criterion) {
    let (model, data) = model_and_data();
    for_each_backend(c, "accuracy-4096", || {
        std::hint::black_box(accuracy(&model, &data).unwrap());
    });
}

fn bench_landscape(c: &mut Criterion) {
    let (model, data) = model_and_data();
    let data = Dataset {
        features: data.features[..512 * 64].to_vec(),
        labels: data.labels[..512].to_vec(),
        ..data
    };
    let theta = vectorize(&model);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a: Vec<f32> = theta.iter().map(|&v| v + rng.gen_range(-0.1..0.1)).collect();
    let b: Vec<f32> = theta.iter().map(|&v| v + rng.gen_range(-0.1..0.1)).collect();
    for_each_backend(c, "landscape-7x7-512", || {
        std::hint::black_box(landscape_grid(&model, &a, &b, 7, 0.25, &data).unwrap());
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = bench_accuracy, bench_landscape
}
criterion_main!(benches);
