use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use emoxfer_core::audio::{SpectrogramExtractor, SAMPLE_RATE};
use emoxfer_core::eval::roc_auc;
use emoxfer_core::model::{self, init_params, Mode};
use emoxfer_core::{ModelParams, StudentConfig, Waveform};

fn spectrogram(c: &mut Criterion) {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let ex = SpectrogramExtractor::new(SAMPLE_RATE).unwrap();
    let w = Waveform::new((0..4 * SAMPLE_RATE).map(|_| r.random_range(-0.5f32..0.5)).collect(), SAMPLE_RATE).unwrap();
    c.bench_function("spectrogram_4s", |b| b.iter(|| ex.compute(&w).unwrap()));
}

fn student(c: &mut Criterion) {
    let mut group = c.benchmark_group("student");
    group.sample_size(10);
    for width in [0.1, 0.25] {
        let cfg = StudentConfig::standard().with_width_multiplier(width);
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let p: ModelParams<f32> = init_params(&cfg, &mut r).unwrap();
        let x = Array3::from_shape_simple_fn((8, 512, 400), || r.random_range(-1.0f32..1.0));
        group.bench_with_input(BenchmarkId::new("forward_eval", width), &x, |b, x| {
            b.iter(|| model::predict(&p, x).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("forward_backward", width), &x, |b, x| {
            b.iter(|| {
                let (out, cache) = model::forward(&p, x, Mode::Train).unwrap();
                model::backward(&p, &cache, &out).unwrap()
            })
        });
    }
    group.finish();
}

fn auc(c: &mut Criterion) {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let scores: Vec<f64> = (0..10_000).map(|_| r.random()).collect();
    let labels: Vec<bool> = (0..10_000).map(|_| r.random_bool(0.2)).collect();
    c.bench_function("roc_auc_10k", |b| b.iter(|| roc_auc(&scores, &labels).unwrap()));
}

criterion_group!(benches, spectrogram, student, auc);
criterion_main!(benches);
