use ndarray::{Array2, Array3};
use rand::Rng;

use emoxfer_core::distill::{batch_mean, distillation_loss, euclidean_logit_loss, LossGrad};
use emoxfer_core::model::{self, init_params, Mode};
use emoxfer_core::rng;
use emoxfer_core::trainer::{sgd_step, OptimState};
use emoxfer_core::{EmotionLogits, ModelParams, StudentConfig, Temperature};

fn rows(out: &Array2<f64>) -> Vec<EmotionLogits> {
    out.rows()
        .into_iter()
        .map(|r| EmotionLogits::from_slice(r.as_slice().unwrap()).unwrap())
        .collect()
}

fn batch_loss<F>(p: &ModelParams<f64>, x: &Array3<f64>, teachers: &[EmotionLogits], f: &F) -> (f64, Array2<f64>)
where
    F: Fn(&EmotionLogits, &EmotionLogits) -> LossGrad,
{
    let (out, _) = model::forward(p, x, Mode::Train).unwrap();
    let (loss, g) = batch_mean(teachers, &rows(&out), f).unwrap();
    (loss, Array2::from_shape_fn((g.len(), 8), |(i, j)| g[i][j]))
}

fn check_gradients<F>(loss: F, seed: u64)
where
    F: Fn(&EmotionLogits, &EmotionLogits) -> LossGrad,
{
    let cfg = StudentConfig::standard().with_width_multiplier(0.03);
    let mut r = rng::substream(seed, "test");
    let mut p: ModelParams<f64> = init_params(&cfg, &mut r).unwrap();
    let x = Array3::from_shape_simple_fn((3, 512, 64), || r.random_range(-1.0..1.0));
    let teachers: Vec<EmotionLogits> = (0..3)
        .map(|_| EmotionLogits::new(std::array::from_fn(|_| r.random_range(-3.0..3.0))).unwrap())
        .collect();
    let (out, cache) = model::forward(&p, &x, Mode::Train).unwrap();
    let (_, g) = batch_mean(&teachers, &rows(&out), &loss).unwrap();
    let gl = Array2::from_shape_fn((3, 8), |(i, j)| g[i][j]);
    let grads = model::backward(&p, &cache, &gl).unwrap();
    let analytic: Vec<Vec<f64>> = grads.tensors(&cfg).into_iter().map(|(_, g)| g.to_vec()).collect();
    let h = 1e-5;
    for (ti, g) in analytic.iter().enumerate() {
        for _ in 0..6 {
            let k = r.random_range(0..g.len());
            let orig = p.trainable_mut()[ti].1[k];
            p.trainable_mut()[ti].1[k] = orig + h;
            let up = batch_loss(&p, &x, &teachers, &loss).0;
            p.trainable_mut()[ti].1[k] = orig - h;
            let down = batch_loss(&p, &x, &teachers, &loss).0;
            p.trainable_mut()[ti].1[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            // Derivatives that vanish structurally (a BN shift cancelled by
            // the next BN) only agree up to finite-difference roundoff.
            let diff = (g[k] - numeric).abs();
            let ok = diff <= 1e-9 || diff / g[k].abs().max(numeric.abs()) < 1e-4;
            assert!(ok, "tensor {ti} entry {k}: analytic {} numeric {numeric}", g[k]);
        }
    }
}

#[test]
fn distillation_gradients_match_finite_differences() {
    let t = Temperature::new(2.0).unwrap();
    check_gradients(|a, b| distillation_loss(a, b, t), 1);
}

#[test]
fn euclidean_gradients_match_finite_differences() {
    check_gradients(euclidean_logit_loss, 2);
}

#[test]
fn repeated_steps_fit_a_fixed_batch() {
    let cfg = StudentConfig::standard().with_width_multiplier(0.05);
    let mut r = rng::substream(3, "test");
    let mut p: ModelParams<f64> = init_params(&cfg, &mut r).unwrap();
    let x = Array3::from_shape_simple_fn((4, 512, 80), || r.random_range(-1.0..1.0));
    let teachers: Vec<EmotionLogits> = (0..4)
        .map(|i| {
            let mut v = [0.0; 8];
            v[i] = 4.0;
            EmotionLogits::new(v).unwrap()
        })
        .collect();
    let t = Temperature::new(2.0).unwrap();
    let f = |a: &EmotionLogits, b: &EmotionLogits| distillation_loss(a, b, t);
    let mut state = OptimState::new(&mut p);
    let first = batch_loss(&p, &x, &teachers, &f).0;
    let mut last = first;
    for _ in 0..30 {
        let (out, cache) = model::forward(&p, &x, Mode::Train).unwrap();
        let (loss, g) = batch_mean(&teachers, &rows(&out), &f).unwrap();
        let gl = Array2::from_shape_fn((4, 8), |(i, j)| g[i][j]);
        let grads = model::backward(&p, &cache, &gl).unwrap();
        p.update_running_stats(&cache).unwrap();
        sgd_step(&mut p, &grads, &mut state, 0.01, 0.9, 0.0).unwrap();
        last = loss;
    }
    assert!(last < 0.9 * first, "loss went from {first} to {last}");
}

#[test]
fn f32_and_f64_forward_agree() {
    let cfg = StudentConfig::standard().with_width_multiplier(0.05);
    let p32: ModelParams<f32> = init_params(&cfg, &mut rng::substream(4, "init")).unwrap();
    let p64: ModelParams<f64> = p32.cast();
    let mut r = rng::substream(4, "x");
    let x64 = Array3::from_shape_simple_fn((2, 512, 100), || r.random_range(-1.0..1.0));
    let x32 = x64.mapv(|v| v as f32);
    let a = model::predict(&p32, &x32).unwrap();
    let b = model::predict(&p64, &x64).unwrap();
    for (u, v) in a.iter().zip(b.iter()) {
        assert!((f64::from(*u) - v).abs() < 1e-3 * (1.0 + v.abs()), "{u} vs {v}");
    }
}
