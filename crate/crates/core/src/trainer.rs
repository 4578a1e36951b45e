//! SGD training of the student against pooled teacher logits.
//!
//! One epoch draws one random segment from every training track. The
//! teacher target for a segment is the pooled logits of the teacher frames
//! that overlap it in time. After each epoch both validation splits are
//! scored on their first `segment_s` seconds in eval mode, and the
//! parameters with the lowest unheard_val loss are kept.

use std::fmt::Write as _;

use log::{debug, info};
use ndarray::{Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::aggregation::{FrameLogitsTrack, Pooling};
use crate::audio::{self, NormalizationAccumulator, NormalizationStats, SpectrogramExtractor, Waveform, SAMPLE_RATE};
use crate::distill::{self, EmotionLogits, LossGrad, Temperature, NUM_EMOTIONS};
use crate::model::{self, Gradients, Mode, ModelParams, Real, StudentConfig};
use crate::rng;
use crate::teacher::{Manifest, Split, TrackRecord};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Cross entropy between temperature-softened distributions.
    #[default]
    Distill,
    /// Squared error on raw logits.
    Euclidean,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "distill" => Ok(LossKind::Distill),
            "euclidean" => Ok(LossKind::Euclidean),
            other => Err(Error::InvalidArgument(format!("unknown loss `{other}`"))),
        }
    }
}

impl LossKind {
    pub fn eval(self, teacher: &EmotionLogits, student: &EmotionLogits, t: Temperature) -> LossGrad {
        match self {
            LossKind::Distill => distill::distillation_loss(teacher, student, t),
            LossKind::Euclidean => distill::euclidean_logit_loss(teacher, student),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_start: f64,
    pub lr_end: f64,
    pub temperature: f64,
    pub segment_s: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossKind,
    pub pooling: Pooling,
    /// Threads used to load audio and compute spectrograms.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            momentum: 0.9,
            weight_decay: 0.0005,
            lr_start: 1e-4,
            lr_end: 1e-5,
            temperature: 2.0,
            segment_s: 4.0,
            batch_size: 8,
            seed: 0,
            loss: LossKind::Distill,
            pooling: Pooling::Max,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if !(self.lr_end > 0.0 && self.lr_start >= self.lr_end) {
            return bad("need lr_start >= lr_end > 0");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight decay must be non-negative");
        }
        if !(self.segment_s > 0.0) {
            return bad("segment length must be positive");
        }
        if self.batch_size < 2 {
            return bad("batch size must be at least 2 for batch norm");
        }
        if self.workers == 0 {
            return bad("workers must be at least 1");
        }
        Temperature::new(self.temperature)?;
        Ok(())
    }
}

/// Geometric interpolation from `lr_start` at epoch 0 to `lr_end` at the
/// last epoch.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(Error::InvalidArgument(format!(
            "epoch {epoch} outside a {}-epoch schedule",
            cfg.epochs
        )));
    }
    if epoch == 0 || cfg.epochs == 1 {
        return Ok(cfg.lr_start);
    }
    if epoch == cfg.epochs - 1 {
        return Ok(cfg.lr_end);
    }
    let t = epoch as f64 / (cfg.epochs - 1) as f64;
    Ok((cfg.lr_start.ln() * (1.0 - t) + cfg.lr_end.ln() * t).exp())
}

/// Momentum buffers, one per trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState<T> {
    pub velocity: Vec<Vec<T>>,
}

impl<T: Real> OptimState<T> {
    pub fn new(params: &mut ModelParams<T>) -> Self {
        let velocity = params
            .trainable_mut()
            .into_iter()
            .map(|(_, t)| vec![T::zero(); t.len()])
            .collect();
        Self { velocity }
    }
}

/// `v <- momentum * v + grad + weight_decay * param; param <- param - lr * v`.
///
/// Batch-norm running statistics are not trainable and are untouched.
pub fn sgd_step<T: Real>(
    params: &mut ModelParams<T>,
    grads: &Gradients<T>,
    state: &mut OptimState<T>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    let cfg = params.config().clone();
    let g = grads.tensors(&cfg);
    let p = params.trainable_mut();
    if g.len() != p.len() || state.velocity.len() != p.len() {
        return Err(Error::Shape(format!(
            "{} parameter tensors, {} gradients, {} momentum buffers",
            p.len(),
            g.len(),
            state.velocity.len()
        )));
    }
    let (lr, mu, wd) = (T::from_f64(lr).unwrap(), T::from_f64(momentum).unwrap(), T::from_f64(weight_decay).unwrap());
    for (((pname, pt), (gname, gt)), v) in p.into_iter().zip(g).zip(state.velocity.iter_mut()) {
        if pname != gname || pt.len() != gt.len() || pt.len() != v.len() {
            return Err(Error::Shape(format!("tensor `{pname}` does not match gradient `{gname}`")));
        }
        for ((x, &gx), vx) in pt.iter_mut().zip(gt).zip(v.iter_mut()) {
            *vx = mu * *vx + gx + wd * *x;
            *x = *x - lr * *vx;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub heard_val_loss: f64,
    pub unheard_val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,lr,train_loss,heard_val_loss,unheard_val_loss\n");
        for e in &self.epochs {
            let _ = writeln!(
                s,
                "{},{:e},{:e},{:e},{:e}",
                e.epoch, e.lr, e.train_loss, e.heard_val_loss, e.unheard_val_loss
            );
        }
        s
    }

    /// Index of the epoch with the lowest unheard_val loss (earliest on ties).
    pub fn best_epoch(&self) -> Option<usize> {
        self.epochs
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.unheard_val_loss.total_cmp(&b.1.unheard_val_loss))
            .map(|(i, _)| i)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub params: ModelParams<f32>,
    pub norm: NormalizationStats,
    pub history: TrainHistory,
    pub best_epoch: usize,
}

struct TrackData<'a> {
    record: &'a TrackRecord,
    teacher: FrameLogitsTrack,
}

/// A spectrogram ready for the network and its teacher target.
struct Example {
    spec: Array2<f32>,
    target: EmotionLogits,
}

struct Frontend {
    extractor: SpectrogramExtractor,
    norm: NormalizationStats,
}

/// Segment source: random crop for training, first `segment_s` for
/// validation.
#[derive(Clone, Copy)]
enum Crop {
    Random(u64),
    Head,
}

fn make_example(manifest: &Manifest, t: &TrackData, frontend: &Frontend, cfg: &TrainConfig, crop: Crop) -> Result<Example> {
    let wave = manifest.load_audio(t.record)?;
    let seg = match crop {
        Crop::Random(seed) => {
            let mut r = rng::substream(seed, rng::STREAM_SAMPLING);
            audio::sample_segment_with_offset(&wave, cfg.segment_s, &mut r)?
        }
        Crop::Head => audio::segment_at(&wave, cfg.segment_s, 0)?,
    };
    let start_s = seg.start as f64 / f64::from(wave.sample_rate);
    let frames = t.teacher.frames_overlapping(start_s, start_s + cfg.segment_s);
    let target = cfg.pooling.pool(frames)?;
    let spec = audio::normalize(&frontend.extractor.compute(&seg.waveform)?, &frontend.norm);
    Ok(Example {
        spec: spec.values,
        target,
    })
}

/// Builds examples in order, spreading the work over `workers` threads.
fn make_examples(
    manifest: &Manifest,
    tracks: &[&TrackData],
    crops: &[Crop],
    frontend: &Frontend,
    cfg: &TrainConfig,
) -> Result<Vec<Example>> {
    if cfg.workers <= 1 || tracks.len() < 2 {
        return tracks
            .iter()
            .zip(crops)
            .map(|(t, &c)| make_example(manifest, t, frontend, cfg, c))
            .collect();
    }
    let chunk = tracks.len().div_ceil(cfg.workers);
    let parts: Vec<Result<Vec<Example>>> = std::thread::scope(|s| {
        let handles: Vec<_> = tracks
            .chunks(chunk)
            .zip(crops.chunks(chunk))
            .map(|(ts, cs)| {
                s.spawn(move || {
                    ts.iter()
                        .zip(cs)
                        .map(|(t, &c)| make_example(manifest, t, frontend, cfg, c))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(tracks.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

fn stack(examples: &[Example]) -> Array3<f32> {
    let (h, w) = examples[0].spec.dim();
    let mut x = Array3::zeros((examples.len(), h, w));
    for (i, e) in examples.iter().enumerate() {
        x.index_axis_mut(Axis(0), i).assign(&e.spec);
    }
    x
}

fn to_logits(row: ndarray::ArrayView1<f32>) -> Result<EmotionLogits> {
    let v: Vec<f64> = row.iter().map(|&x| f64::from(x)).collect();
    EmotionLogits::from_slice(&v)
}

/// Splits `n` items into batches of `size`, folding a trailing singleton
/// into the previous batch (batch norm needs two items).
fn batch_ranges(n: usize, size: usize) -> Vec<std::ops::Range<usize>> {
    let mut out: Vec<std::ops::Range<usize>> = (0..n).step_by(size).map(|s| s..(s + size).min(n)).collect();
    if out.len() > 1 && out.last().is_some_and(|r| r.len() == 1) {
        let last = out.pop().unwrap();
        out.last_mut().unwrap().end = last.end;
    }
    out
}

/// Fits per-bin normalization on the head segment of each training track.
pub fn fit_train_normalization(manifest: &Manifest, segment_s: f64) -> Result<NormalizationStats> {
    let extractor = SpectrogramExtractor::new(SAMPLE_RATE)?;
    let mut acc = NormalizationAccumulator::default();
    for r in manifest.split(Split::Train) {
        let wave = manifest.load_audio(r)?;
        let seg = audio::segment_at(&wave, segment_s, 0)?;
        acc.add(&extractor.compute(&seg.waveform)?);
    }
    acc.finish()
}

/// Mean loss of eval-mode predictions over a split.
fn evaluate_split(
    params: &ModelParams<f32>,
    manifest: &Manifest,
    tracks: &[&TrackData],
    frontend: &Frontend,
    cfg: &TrainConfig,
) -> Result<f64> {
    let t = Temperature::new(cfg.temperature)?;
    let mut total = 0.0;
    for range in batch_ranges(tracks.len(), cfg.batch_size) {
        let crops = vec![Crop::Head; range.len()];
        let ex = make_examples(manifest, &tracks[range], &crops, frontend, cfg)?;
        let logits = model::predict(params, &stack(&ex))?;
        for (row, e) in logits.axis_iter(Axis(0)).zip(&ex) {
            total += cfg.loss.eval(&e.target, &to_logits(row)?, t).loss;
        }
    }
    Ok(total / tracks.len() as f64)
}

/// Keeps large buffers in the glibc heap instead of mapping and unmapping
/// them on every batch. Activation and im2col buffers are tens of megabytes,
/// above the default mmap threshold, so without this each batch pays for
/// fresh page faults. Process-wide; a no-op on other platforms.
pub fn retain_large_allocations() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    // SAFETY: mallopt only adjusts allocator tuning parameters.
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_TOP_PAD, 256 << 20);
    }
}

/// Runs the full schedule and returns the parameters with the lowest
/// unheard_val loss. Deterministic for a given seed; `workers` only changes
/// how fast examples are prepared. Calls [`retain_large_allocations`].
pub fn train(manifest: &Manifest, cfg: &TrainConfig, student: &StudentConfig) -> Result<TrainOutput> {
    retain_large_allocations();
    cfg.validate()?;
    student.validate()?;
    let temperature = Temperature::new(cfg.temperature)?;
    let load = |split: Split| -> Result<Vec<TrackData>> {
        let recs = manifest.split(split);
        if recs.is_empty() {
            return Err(Error::Empty(format!("split {} has no tracks", split.name())));
        }
        recs.into_iter()
            .map(|record| {
                Ok(TrackData {
                    record,
                    teacher: manifest.load_frame_logits(record)?,
                })
            })
            .collect()
    };
    let train_set = load(Split::Train)?;
    let heard = load(Split::HeardVal)?;
    let unheard = load(Split::UnheardVal)?;
    if train_set.len() < 2 {
        return Err(Error::InvalidArgument("need at least two training tracks".into()));
    }
    info!(
        "training on {} tracks; {} heard_val, {} unheard_val",
        train_set.len(),
        heard.len(),
        unheard.len()
    );

    let frontend = Frontend {
        extractor: SpectrogramExtractor::new(SAMPLE_RATE)?,
        norm: fit_train_normalization(manifest, cfg.segment_s)?,
    };
    let frames = frontend.extractor.frame_count((cfg.segment_s * f64::from(SAMPLE_RATE)).round() as usize);
    let min = model::min_width(student)?;
    if frames < min {
        return Err(Error::WidthTooSmall { width: frames, min });
    }

    let mut params: ModelParams<f32> = model::init_params(student, &mut rng::substream(cfg.seed, rng::STREAM_INIT))?;
    let mut state = OptimState::new(&mut params);
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, usize, ModelParams<f32>)> = None;
    let train_refs: Vec<&TrackData> = train_set.iter().collect();
    let heard_refs: Vec<&TrackData> = heard.iter().collect();
    let unheard_refs: Vec<&TrackData> = unheard.iter().collect();

    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(epoch, cfg)?;
        let mut erng = rng::indexed(cfg.seed, rng::STREAM_SAMPLING, epoch as u64);
        let mut order: Vec<usize> = (0..train_refs.len()).collect();
        order.shuffle(&mut erng);
        let crop_seeds: Vec<u64> = order.iter().map(|_| erng.random()).collect();

        let mut loss_sum = 0.0;
        for range in batch_ranges(order.len(), cfg.batch_size) {
            let tracks: Vec<&TrackData> = order[range.clone()].iter().map(|&i| train_refs[i]).collect();
            let crops: Vec<Crop> = crop_seeds[range].iter().map(|&s| Crop::Random(s)).collect();
            let ex = make_examples(manifest, &tracks, &crops, &frontend, cfg)?;
            let (logits, cache) = model::forward(&params, &stack(&ex), Mode::Train)?;
            let teachers: Vec<EmotionLogits> = ex.iter().map(|e| e.target).collect();
            let students = logits.axis_iter(Axis(0)).map(to_logits).collect::<Result<Vec<_>>>()?;
            let (loss, grad_rows) = distill::batch_mean(&teachers, &students, |t, s| cfg.loss.eval(t, s, temperature))?;
            if !loss.is_finite() {
                return Err(Error::Diverged(format!("non-finite training loss at epoch {epoch}")));
            }
            let mut grad = Array2::<f32>::zeros((ex.len(), NUM_EMOTIONS));
            for (i, g) in grad_rows.iter().enumerate() {
                for (j, v) in g.iter().enumerate() {
                    grad[[i, j]] = *v as f32;
                }
            }
            let grads = model::backward(&params, &cache, &grad)?;
            params.update_running_stats(&cache)?;
            sgd_step(&mut params, &grads, &mut state, lr, cfg.momentum, cfg.weight_decay)?;
            loss_sum += loss * ex.len() as f64;
            debug!("epoch {epoch} batch loss {loss:.6}");
        }
        let train_loss = loss_sum / order.len() as f64;
        let heard_val_loss = evaluate_split(&params, manifest, &heard_refs, &frontend, cfg)?;
        let unheard_val_loss = evaluate_split(&params, manifest, &unheard_refs, &frontend, cfg)?;
        if !(heard_val_loss.is_finite() && unheard_val_loss.is_finite()) {
            return Err(Error::Diverged(format!("non-finite validation loss at epoch {epoch}")));
        }
        info!(
            "epoch {epoch}: lr {lr:.3e} train {train_loss:.5} heard_val {heard_val_loss:.5} unheard_val {unheard_val_loss:.5}"
        );
        history.epochs.push(EpochRecord {
            epoch,
            lr,
            train_loss,
            heard_val_loss,
            unheard_val_loss,
        });
        if best.as_ref().is_none_or(|(l, _, _)| unheard_val_loss < *l) {
            best = Some((unheard_val_loss, epoch, params.clone()));
        }
    }
    let (_, best_epoch, params) = best.expect("at least one epoch");
    Ok(TrainOutput {
        params,
        norm: frontend.norm,
        history,
        best_epoch,
    })
}

/// Eval-mode logits for a whole utterance. Utterances shorter than the
/// network's minimum width are zero-padded up to it.
pub fn predict_waveform(
    params: &ModelParams<f32>,
    norm: &NormalizationStats,
    extractor: &SpectrogramExtractor,
    wave: &Waveform,
) -> Result<EmotionLogits> {
    let min_frames = model::min_width(params.config())?;
    let hop = (audio::HOP_SECONDS * f64::from(wave.sample_rate)).round() as usize;
    let min_samples = min_frames * hop;
    let padded;
    let w = if wave.len() < min_samples {
        let mut s = wave.samples.clone();
        s.resize(min_samples, 0.0);
        padded = Waveform::new(s, wave.sample_rate)?;
        &padded
    } else {
        wave
    };
    let spec = audio::normalize(&extractor.compute(w)?, norm);
    let x = spec.values.insert_axis(Axis(0));
    let out = model::predict(params, &x)?;
    to_logits(out.row(0))
}

/// Full-utterance eval-mode logits for each record, in order.
pub fn predict_tracks(
    params: &ModelParams<f32>,
    norm: &NormalizationStats,
    manifest: &Manifest,
    records: &[&TrackRecord],
    workers: usize,
) -> Result<Vec<EmotionLogits>> {
    let extractor = SpectrogramExtractor::new(SAMPLE_RATE)?;
    let one = |r: &TrackRecord| predict_waveform(params, norm, &extractor, &manifest.load_audio(r)?);
    if workers <= 1 || records.len() < 2 {
        return records.iter().map(|r| one(r)).collect();
    }
    let chunk = records.len().div_ceil(workers);
    let parts: Vec<Result<Vec<EmotionLogits>>> = std::thread::scope(|s| {
        let handles: Vec<_> = records
            .chunks(chunk)
            .map(|rs| s.spawn(move || rs.iter().map(|r| one(r)).collect::<Result<Vec<_>>>()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(records.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}
