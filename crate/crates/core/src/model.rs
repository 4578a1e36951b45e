//! The student spectrogram CNN.
//!
//! Layers are described by a [`StudentConfig`]: convolutions (each followed
//! by batch norm and ReLU, except the output layer which carries a bias),
//! max-pools, and one dynamic average pool that collapses whatever spatial
//! extent reaches it. `fc6`..`fc8` are convolutions too: `fc6` has a 9x1
//! frequency support and `fc7`/`fc8` are 1x1 after the pool, so the network
//! accepts any input width at or above [`min_width`].
//!
//! Activations are `(batch, channels, freq, time)` arrays. The code is
//! generic over [`Real`] so the same network runs in `f32` for training and
//! in `f64` for gradient checks.

use std::fmt::Debug;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array4, ArrayView2, ArrayViewMut2, Axis};
use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub trait Real:
    ndarray::LinalgScalar + Float + FromPrimitive + ToPrimitive + Debug + Default + Send + Sync + 'static
{
}

impl<T> Real for T where
    T: ndarray::LinalgScalar + Float + FromPrimitive + ToPrimitive + Debug + Default + Send + Sync + 'static
{
}

#[inline]
fn cast<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("representable")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        name: String,
        kernel: [usize; 2],
        stride: [usize; 2],
        pad: [usize; 2],
        channels: usize,
        /// Batch norm + ReLU after the convolution. Without it the layer has
        /// a bias and no activation.
        batch_norm: bool,
    },
    MaxPool {
        name: String,
        kernel: [usize; 2],
        stride: [usize; 2],
        pad: [usize; 2],
    },
    /// Average over the full remaining (freq, time) extent.
    AvgPool { name: String },
}

impl LayerSpec {
    pub fn name(&self) -> &str {
        match self {
            LayerSpec::Conv { name, .. } | LayerSpec::MaxPool { name, .. } | LayerSpec::AvgPool { name } => name,
        }
    }

    fn conv(name: &str, kernel: [usize; 2], stride: [usize; 2], pad: [usize; 2], channels: usize, batch_norm: bool) -> Self {
        LayerSpec::Conv {
            name: name.into(),
            kernel,
            stride,
            pad,
            channels,
            batch_norm,
        }
    }

    fn maxpool(name: &str, kernel: [usize; 2], stride: [usize; 2], pad: [usize; 2]) -> Self {
        LayerSpec::MaxPool {
            name: name.into(),
            kernel,
            stride,
            pad,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentConfig {
    pub input_height: usize,
    pub layers: Vec<LayerSpec>,
    /// Scales the channel count of every convolution except the output
    /// layer. Must lie in (0, 1].
    pub width_multiplier: f64,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for StudentConfig {
    fn default() -> Self {
        Self::standard()
    }
}

impl StudentConfig {
    /// The reference architecture with an 8-way emotion head.
    pub fn standard() -> Self {
        let layers = vec![
            LayerSpec::conv("conv1", [7, 7], [2, 2], [1, 1], 96, true),
            LayerSpec::maxpool("mpool1", [3, 3], [2, 2], [0, 1]),
            LayerSpec::conv("conv2", [5, 5], [2, 2], [1, 1], 256, true),
            LayerSpec::maxpool("mpool2", [3, 3], [2, 2], [0, 0]),
            LayerSpec::conv("conv3", [3, 3], [1, 1], [1, 1], 256, true),
            LayerSpec::conv("conv4", [3, 3], [1, 1], [1, 1], 256, true),
            LayerSpec::conv("conv5", [3, 3], [1, 1], [1, 1], 256, true),
            LayerSpec::maxpool("mpool5", [5, 3], [3, 2], [0, 0]),
            LayerSpec::conv("fc6", [9, 1], [1, 1], [0, 0], 4096, true),
            LayerSpec::AvgPool { name: "apool6".into() },
            LayerSpec::conv("fc7", [1, 1], [1, 1], [0, 0], 1024, true),
            LayerSpec::conv("fc8", [1, 1], [1, 1], [0, 0], crate::NUM_EMOTIONS, false),
        ];
        Self {
            input_height: crate::audio::FREQ_BINS,
            layers,
            width_multiplier: 1.0,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }

    pub fn with_width_multiplier(mut self, m: f64) -> Self {
        self.width_multiplier = m;
        self
    }

    /// Replaces the output layer width (1251 gives the original
    /// identity-classification head).
    pub fn with_output_dim(mut self, n: usize) -> Self {
        if let Some(LayerSpec::Conv { channels, .. }) = self.layers.iter_mut().rev().find(|l| matches!(l, LayerSpec::Conv { .. })) {
            *channels = n;
        }
        self
    }

    pub fn output_dim(&self) -> usize {
        self.last_conv()
            .and_then(|i| match &self.layers[i] {
                LayerSpec::Conv { channels, .. } => Some(*channels),
                _ => None,
            })
            .unwrap_or(0)
    }

    fn last_conv(&self) -> Option<usize> {
        self.layers.iter().rposition(|l| matches!(l, LayerSpec::Conv { .. }))
    }

    /// Effective output channels of layer `i` after the width multiplier.
    pub fn channels(&self, i: usize) -> usize {
        match &self.layers[i] {
            LayerSpec::Conv { channels, .. } if Some(i) == self.last_conv() => *channels,
            LayerSpec::Conv { channels, .. } => ((*channels as f64 * self.width_multiplier).round() as usize).max(1),
            _ => 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.width_multiplier > 0.0 && self.width_multiplier <= 1.0) {
            return bad(format!("width multiplier {} outside (0, 1]", self.width_multiplier));
        }
        if self.input_height == 0 {
            return bad("input height must be positive".into());
        }
        if !(self.bn_eps > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return bad("invalid batch-norm constants".into());
        }
        let Some(last) = self.last_conv() else {
            return bad("config has no convolution layers".into());
        };
        if let LayerSpec::Conv { batch_norm: true, .. } = self.layers[last] {
            return bad("output layer must not use batch norm".into());
        }
        for l in &self.layers {
            match l {
                LayerSpec::Conv { kernel, stride, channels, .. } => {
                    if kernel.contains(&0) || stride.contains(&0) || *channels == 0 {
                        return bad(format!("layer {} has a zero kernel, stride or channel count", l.name()));
                    }
                }
                LayerSpec::MaxPool { kernel, stride, pad, .. } => {
                    if kernel.contains(&0) || stride.contains(&0) {
                        return bad(format!("layer {} has a zero kernel or stride", l.name()));
                    }
                    if pad[0] >= kernel[0] || pad[1] >= kernel[1] {
                        return bad(format!("layer {} pads by a full kernel", l.name()));
                    }
                }
                LayerSpec::AvgPool { .. } => {}
            }
        }
        Ok(())
    }
}

/// Output shape of one layer, `channels x height x width`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerShape {
    pub name: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

fn out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    (padded >= kernel).then(|| (padded - kernel) / stride + 1)
}

/// Per-layer output shapes for an input of `frames` columns.
pub fn shape_chain(cfg: &StudentConfig, frames: usize) -> Result<Vec<LayerShape>> {
    cfg.validate()?;
    let (mut c, mut h, mut w) = (1usize, cfg.input_height, frames);
    let mut out = Vec::with_capacity(cfg.layers.len());
    for (i, l) in cfg.layers.iter().enumerate() {
        match l {
            LayerSpec::Conv { kernel, stride, pad, .. } | LayerSpec::MaxPool { kernel, stride, pad, .. } => {
                let err = Error::InvalidArgument(format!("input of {h}x{w} is too small for layer {}", l.name()));
                match (out_len(h, kernel[0], stride[0], pad[0]), out_len(w, kernel[1], stride[1], pad[1])) {
                    (Some(nh), Some(nw)) => (h, w) = (nh, nw),
                    _ => return Err(err),
                }
                if let LayerSpec::Conv { .. } = l {
                    c = cfg.channels(i);
                }
            }
            LayerSpec::AvgPool { .. } => {
                h = 1;
                w = 1;
            }
        }
        out.push(LayerShape {
            name: l.name().to_string(),
            channels: c,
            height: h,
            width: w,
        });
    }
    Ok(out)
}

/// Smallest input width for which every layer produces a non-empty output.
pub fn min_width(cfg: &StudentConfig) -> Result<usize> {
    cfg.validate()?;
    (1..=1 << 16)
        .find(|&f| shape_chain(cfg, f).is_ok())
        .ok_or_else(|| Error::InvalidArgument("no admissible input width".into()))
}

/// Temporal extent entering the dynamic average pool.
pub fn output_pool_length(cfg: &StudentConfig, frames: usize) -> Result<usize> {
    let min = min_width(cfg)?;
    if frames < min {
        return Err(Error::WidthTooSmall { width: frames, min });
    }
    let chain = shape_chain(cfg, frames)?;
    let idx = cfg
        .layers
        .iter()
        .position(|l| matches!(l, LayerSpec::AvgPool { .. }))
        .ok_or_else(|| Error::InvalidArgument("config has no average pool".into()))?;
    Ok(if idx == 0 { frames } else { chain[idx - 1].width })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams<T> {
    pub gamma: Array1<T>,
    pub beta: Array1<T>,
    pub running_mean: Array1<T>,
    pub running_var: Array1<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T> {
    /// `(out_channels, in_channels, kernel_h, kernel_w)`.
    pub weight: Array4<T>,
    pub bias: Option<Array1<T>>,
    pub bn: Option<BatchNormParams<T>>,
}

/// All learnable tensors plus batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T = f32> {
    config: StudentConfig,
    /// Indexed like `config.layers`; `None` for pooling layers.
    layers: Vec<Option<ConvParams<T>>>,
    generation: u64,
}

/// Standard deviation used to initialise a convolution with this fan-in.
pub fn init_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

/// Gaussian weights with std `sqrt(2 / fan_in)`, zero biases, unit BN scale,
/// zero BN shift, running stats (0, 1).
pub fn init_params<T: Real, R: Rng + ?Sized>(cfg: &StudentConfig, rng: &mut R) -> Result<ModelParams<T>> {
    cfg.validate()?;
    let mut in_c = 1usize;
    let mut layers = Vec::with_capacity(cfg.layers.len());
    for (i, l) in cfg.layers.iter().enumerate() {
        match l {
            LayerSpec::Conv { kernel, batch_norm, .. } => {
                let out_c = cfg.channels(i);
                let fan_in = in_c * kernel[0] * kernel[1];
                let normal = Normal::new(0.0, init_std(fan_in)).expect("positive std");
                let weight = Array4::from_shape_simple_fn((out_c, in_c, kernel[0], kernel[1]), || cast::<T>(normal.sample(rng)));
                let (bias, bn) = if *batch_norm {
                    (
                        None,
                        Some(BatchNormParams {
                            gamma: Array1::from_elem(out_c, T::one()),
                            beta: Array1::zeros(out_c),
                            running_mean: Array1::zeros(out_c),
                            running_var: Array1::from_elem(out_c, T::one()),
                        }),
                    )
                } else {
                    (Some(Array1::zeros(out_c)), None)
                };
                layers.push(Some(ConvParams { weight, bias, bn }));
                in_c = out_c;
            }
            _ => layers.push(None),
        }
    }
    Ok(ModelParams {
        config: cfg.clone(),
        layers,
        generation: 0,
    })
}

/// A tensor together with its name and shape.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl<T: Real> ModelParams<T> {
    pub fn config(&self) -> &StudentConfig {
        &self.config
    }

    pub fn layer(&self, i: usize) -> Option<&ConvParams<T>> {
        self.layers.get(i).and_then(Option::as_ref)
    }

    /// Bumped on every mutation; caches from older generations are stale.
    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn touch(&mut self) {
        self.generation += 1;
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        let c = |a: &Array1<T>| a.mapv(|v| U::from_f64(v.to_f64().unwrap()).unwrap());
        ModelParams {
            config: self.config.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| {
                    l.as_ref().map(|p| ConvParams {
                        weight: p.weight.mapv(|v| U::from_f64(v.to_f64().unwrap()).unwrap()),
                        bias: p.bias.as_ref().map(c),
                        bn: p.bn.as_ref().map(|bn| BatchNormParams {
                            gamma: c(&bn.gamma),
                            beta: c(&bn.beta),
                            running_mean: c(&bn.running_mean),
                            running_var: c(&bn.running_var),
                        }),
                    })
                })
                .collect(),
            generation: self.generation,
        }
    }

    /// Trainable tensors in a fixed order, named `<layer>.weight`,
    /// `<layer>.bias`, `<layer>.bn.gamma`, `<layer>.bn.beta`.
    pub fn trainable_mut(&mut self) -> Vec<(String, &mut [T])> {
        self.generation += 1;
        let mut out = Vec::new();
        for (spec, layer) in self.config.layers.iter().zip(self.layers.iter_mut()) {
            let Some(p) = layer else { continue };
            let name = spec.name();
            out.push((format!("{name}.weight"), p.weight.as_slice_mut().expect("standard layout")));
            if let Some(b) = &mut p.bias {
                out.push((format!("{name}.bias"), b.as_slice_mut().expect("standard layout")));
            }
            if let Some(bn) = &mut p.bn {
                out.push((format!("{name}.bn.gamma"), bn.gamma.as_slice_mut().expect("standard layout")));
                out.push((format!("{name}.bn.beta"), bn.beta.as_slice_mut().expect("standard layout")));
            }
        }
        out
    }

    pub fn num_trainable(&self) -> usize {
        self.layers
            .iter()
            .flatten()
            .map(|p| {
                p.weight.len()
                    + p.bias.as_ref().map_or(0, |b| b.len())
                    + p.bn.as_ref().map_or(0, |bn| bn.gamma.len() + bn.beta.len())
            })
            .sum()
    }

    /// Folds train-mode batch statistics into the running statistics:
    /// `running = (1 - momentum) * running + momentum * batch` with the
    /// unbiased batch variance.
    pub fn update_running_stats(&mut self, cache: &ForwardCache<T>) -> Result<()> {
        if cache.mode != Mode::Train {
            return Err(Error::InvalidArgument("running stats need a train-mode cache".into()));
        }
        let m: T = cast(self.config.bn_momentum);
        for (layer, lc) in self.layers.iter_mut().zip(&cache.layers) {
            if let (Some(ConvParams { bn: Some(bn), .. }), LayerCache::Conv { bn: Some(bc), .. }) = (layer, lc) {
                let n = T::from_usize(bc.count).unwrap();
                let unbias = if bc.count > 1 { n / (n - T::one()) } else { T::one() };
                for c in 0..bn.running_mean.len() {
                    bn.running_mean[c] = (T::one() - m) * bn.running_mean[c] + m * bc.mean[c];
                    bn.running_var[c] = (T::one() - m) * bn.running_var[c] + m * bc.var[c] * unbias;
                }
            }
        }
        self.generation += 1;
        Ok(())
    }

    /// Every tensor (including running stats) as `f32`, in checkpoint order.
    pub fn named_tensors(&self) -> Vec<NamedTensor> {
        let to32 = |a: &[T]| a.iter().map(|v| v.to_f32().unwrap()).collect::<Vec<_>>();
        let mut out = Vec::new();
        for (spec, layer) in self.config.layers.iter().zip(&self.layers) {
            let Some(p) = layer else { continue };
            let name = spec.name();
            out.push(NamedTensor {
                name: format!("{name}.weight"),
                shape: p.weight.shape().to_vec(),
                data: to32(p.weight.as_slice().unwrap()),
            });
            if let Some(b) = &p.bias {
                out.push(NamedTensor {
                    name: format!("{name}.bias"),
                    shape: vec![b.len()],
                    data: to32(b.as_slice().unwrap()),
                });
            }
            if let Some(bn) = &p.bn {
                for (suffix, t) in [
                    ("bn.gamma", &bn.gamma),
                    ("bn.beta", &bn.beta),
                    ("bn.running_mean", &bn.running_mean),
                    ("bn.running_var", &bn.running_var),
                ] {
                    out.push(NamedTensor {
                        name: format!("{name}.{suffix}"),
                        shape: vec![t.len()],
                        data: to32(t.as_slice().unwrap()),
                    });
                }
            }
        }
        out
    }

    /// Inverse of [`named_tensors`](Self::named_tensors). Every expected
    /// tensor must be present with the right shape; extra names are an error.
    pub fn from_named_tensors(cfg: &StudentConfig, tensors: &[NamedTensor]) -> Result<Self> {
        let mut params: ModelParams<T> = init_params(cfg, &mut crate::rng::substream(0, "shape-only"))?;
        let expected = params.named_tensors();
        if expected.len() != tensors.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, config expects {}",
                tensors.len(),
                expected.len()
            )));
        }
        for (e, t) in expected.iter().zip(tensors) {
            if e.name != t.name || e.shape != t.shape || t.data.len() != e.data.len() {
                return Err(Error::Format(format!(
                    "tensor `{}` {:?} does not match expected `{}` {:?}",
                    t.name, t.shape, e.name, e.shape
                )));
            }
            if t.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("tensor `{}`", t.name)));
            }
        }
        let mut it = tensors.iter();
        let mut fill = |dst: &mut [T]| {
            let src = it.next().expect("count checked");
            for (d, s) in dst.iter_mut().zip(&src.data) {
                *d = T::from_f32(*s).unwrap();
            }
        };
        for p in params.layers.iter_mut().flatten() {
            fill(p.weight.as_slice_mut().unwrap());
            if let Some(b) = &mut p.bias {
                fill(b.as_slice_mut().unwrap());
            }
            if let Some(bn) = &mut p.bn {
                fill(bn.gamma.as_slice_mut().unwrap());
                fill(bn.beta.as_slice_mut().unwrap());
                fill(bn.running_mean.as_slice_mut().unwrap());
                fill(bn.running_var.as_slice_mut().unwrap());
            }
        }
        let bad_var = params
            .layers
            .iter()
            .flatten()
            .filter_map(|p| p.bn.as_ref())
            .any(|bn| bn.running_var.iter().any(|v| *v <= T::zero()));
        if bad_var {
            return Err(Error::Format("non-positive running variance".into()));
        }
        Ok(params)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
struct BnCache<T> {
    xhat: Array4<T>,
    inv_std: Array1<T>,
    mean: Array1<T>,
    /// Biased batch variance.
    var: Array1<T>,
    count: usize,
}

#[derive(Debug, Clone)]
enum LayerCache<T> {
    Conv { bn: Option<BnCache<T>> },
    MaxPool { argmax: Vec<u32> },
    AvgPool,
}

/// Everything backward needs from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    mode: Mode,
    generation: u64,
    /// `acts[i]` is the input of layer `i`; the last entry is the output.
    acts: Vec<Array4<T>>,
    layers: Vec<LayerCache<T>>,
}

impl<T: Real> ForwardCache<T> {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Per-channel mean and variance of the normalized pre-activation of
    /// every batch-norm layer, `(layer name, means, variances)`.
    pub fn normalized_moments(&self, cfg: &StudentConfig) -> Vec<(String, Vec<f64>, Vec<f64>)> {
        let mut out = Vec::new();
        for (spec, lc) in cfg.layers.iter().zip(&self.layers) {
            if let LayerCache::Conv { bn: Some(bc) } = lc {
                let ch = bc.xhat.dim().1;
                let mut means = Vec::with_capacity(ch);
                let mut vars = Vec::with_capacity(ch);
                for c in 0..ch {
                    let v = bc.xhat.index_axis(Axis(1), c);
                    let n = v.len() as f64;
                    let m = v.iter().map(|x| x.to_f64().unwrap()).sum::<f64>() / n;
                    let var = v.iter().map(|x| (x.to_f64().unwrap() - m).powi(2)).sum::<f64>() / n;
                    means.push(m);
                    vars.push(var);
                }
                out.push((spec.name().to_string(), means, vars));
            }
        }
        out
    }
}

struct ConvGeom {
    in_c: usize,
    in_h: usize,
    in_w: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    fn new(in_dim: (usize, usize, usize), kernel: [usize; 2], stride: [usize; 2], pad: [usize; 2]) -> Result<Self> {
        let (in_c, in_h, in_w) = in_dim;
        let too_small = || Error::Shape(format!("input {in_h}x{in_w} too small for kernel {kernel:?}"));
        Ok(Self {
            in_c,
            in_h,
            in_w,
            kh: kernel[0],
            kw: kernel[1],
            sh: stride[0],
            sw: stride[1],
            ph: pad[0],
            pw: pad[1],
            out_h: out_len(in_h, kernel[0], stride[0], pad[0]).ok_or_else(too_small)?,
            out_w: out_len(in_w, kernel[1], stride[1], pad[1]).ok_or_else(too_small)?,
        })
    }

    fn k(&self) -> usize {
        self.in_c * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Output columns `lo..hi` that read inside the input at kernel offset
    /// `kj`, and the input column read by `lo`.
    fn ow_range(&self, kj: usize) -> (usize, usize, usize) {
        let lo = self.pw.saturating_sub(kj).div_ceil(self.sw).min(self.out_w);
        let hi = (self.in_w + self.pw)
            .checked_sub(kj + 1)
            .map_or(0, |last| last / self.sw + 1)
            .clamp(lo, self.out_w);
        let start = (lo * self.sw + kj).saturating_sub(self.pw).min(self.in_w);
        (lo, hi, start)
    }

    #[inline]
    fn ih(&self, oh: usize, ki: usize) -> Option<usize> {
        (oh * self.sh + ki).checked_sub(self.ph).filter(|&v| v < self.in_h)
    }

    /// Unfolds one `(C, H, W)` sample into a `(C*kh*kw, out_h*out_w)` matrix.
    fn im2col<T: Real>(&self, x: &[T], cols: &mut [T]) {
        let p = self.p();
        for c in 0..self.in_c {
            let plane = &x[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = ((c * self.kh + ki) * self.kw + kj) * p;
                    let (lo, hi, start) = self.ow_range(kj);
                    for oh in 0..self.out_h {
                        let dst = &mut cols[row + oh * self.out_w..row + (oh + 1) * self.out_w];
                        let Some(ih) = self.ih(oh, ki) else {
                            dst.fill(T::zero());
                            continue;
                        };
                        let src = &plane[ih * self.in_w + start..(ih + 1) * self.in_w];
                        dst[..lo].fill(T::zero());
                        dst[hi..].fill(T::zero());
                        if self.sw == 1 {
                            dst[lo..hi].copy_from_slice(&src[..hi - lo]);
                        } else {
                            for (d, chunk) in dst[lo..hi].iter_mut().zip(src.chunks(self.sw)) {
                                *d = chunk[0];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col`]: accumulates columns back into a sample.
    fn col2im<T: Real>(&self, cols: &[T], dx: &mut [T]) {
        let p = self.p();
        for c in 0..self.in_c {
            let plane = &mut dx[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = ((c * self.kh + ki) * self.kw + kj) * p;
                    let (lo, hi, start) = self.ow_range(kj);
                    for oh in 0..self.out_h {
                        let Some(ih) = self.ih(oh, ki) else { continue };
                        let src = &cols[row + oh * self.out_w + lo..row + oh * self.out_w + hi];
                        let dst = &mut plane[ih * self.in_w + start..(ih + 1) * self.in_w];
                        for (d, &v) in dst.iter_mut().step_by(self.sw).zip(src) {
                            *d = *d + v;
                        }
                    }
                }
            }
        }
    }
}

fn conv_forward<T: Real>(x: &Array4<T>, p: &ConvParams<T>, g: &ConvGeom) -> Array4<T> {
    let (b, _, _, _) = x.dim();
    let out_c = p.weight.dim().0;
    let w2 = p.weight.view().into_shape_with_order((out_c, g.k())).expect("contiguous weight");
    let mut out = Array4::<T>::zeros((b, out_c, g.out_h, g.out_w));
    let mut cols = vec![T::zero(); g.k() * g.p()];
    for i in 0..b {
        let xi = x.index_axis(Axis(0), i);
        let xs = xi.as_slice().expect("standard layout");
        let colv = if g.kh == 1 && g.kw == 1 && g.sh == 1 && g.sw == 1 && g.ph == 0 && g.pw == 0 {
            ArrayView2::from_shape((g.k(), g.p()), xs).unwrap()
        } else {
            g.im2col(xs, &mut cols);
            ArrayView2::from_shape((g.k(), g.p()), &cols[..]).unwrap()
        };
        let mut oi = out.index_axis_mut(Axis(0), i);
        let mut o2: ArrayViewMut2<T> = oi.view_mut().into_shape_with_order((out_c, g.p())).unwrap();
        general_mat_mul(T::one(), &w2, &colv, T::zero(), &mut o2);
        if let Some(bias) = &p.bias {
            for (c, mut row) in o2.axis_iter_mut(Axis(0)).enumerate() {
                row.mapv_inplace(|v| v + bias[c]);
            }
        }
    }
    out
}

/// Returns `(dW, dbias, dx)`; `dx` only when requested.
fn conv_backward<T: Real>(
    x: &Array4<T>,
    dout: &Array4<T>,
    p: &ConvParams<T>,
    g: &ConvGeom,
    need_dx: bool,
) -> (Array4<T>, Option<Array1<T>>, Option<Array4<T>>) {
    let (b, _, _, _) = x.dim();
    let out_c = p.weight.dim().0;
    let w2 = p.weight.view().into_shape_with_order((out_c, g.k())).unwrap();
    let mut dw = Array4::<T>::zeros(p.weight.raw_dim());
    let mut dbias = p.bias.as_ref().map(|bb| Array1::<T>::zeros(bb.len()));
    let mut dx = need_dx.then(|| Array4::<T>::zeros(x.raw_dim()));
    let direct = g.kh == 1 && g.kw == 1 && g.sh == 1 && g.sw == 1 && g.ph == 0 && g.pw == 0;
    let mut cols = vec![T::zero(); g.k() * g.p()];
    let mut dcols = vec![T::zero(); if need_dx && !direct { g.k() * g.p() } else { 0 }];
    {
        let mut dw2 = dw.view_mut().into_shape_with_order((out_c, g.k())).unwrap();
        for i in 0..b {
            let xi = x.index_axis(Axis(0), i);
            let xs = xi.as_slice().unwrap();
            let colv = if direct {
                ArrayView2::from_shape((g.k(), g.p()), xs).unwrap()
            } else {
                g.im2col(xs, &mut cols);
                ArrayView2::from_shape((g.k(), g.p()), &cols[..]).unwrap()
            };
            let di = dout.index_axis(Axis(0), i);
            let d2 = di.into_shape_with_order((out_c, g.p())).unwrap();
            general_mat_mul(T::one(), &d2, &colv.t(), T::one(), &mut dw2);
            if let Some(db) = &mut dbias {
                for (c, row) in d2.axis_iter(Axis(0)).enumerate() {
                    db[c] = db[c] + row.sum();
                }
            }
            if let Some(dx) = &mut dx {
                let mut dxi = dx.index_axis_mut(Axis(0), i);
                let dxs = dxi.as_slice_mut().unwrap();
                if direct {
                    let mut dx2 = ArrayViewMut2::from_shape((g.k(), g.p()), dxs).unwrap();
                    general_mat_mul(T::one(), &w2.t(), &d2, T::zero(), &mut dx2);
                } else {
                    let mut dc = ArrayViewMut2::from_shape((g.k(), g.p()), &mut dcols[..]).unwrap();
                    general_mat_mul(T::one(), &w2.t(), &d2, T::zero(), &mut dc);
                    g.col2im(&dcols, dxs);
                }
            }
        }
    }
    (dw, dbias, dx)
}

/// Batch norm + ReLU in place on `z`. Returns the cache in train mode.
fn bn_relu_forward<T: Real>(z: &mut Array4<T>, bn: &BatchNormParams<T>, eps: f64, mode: Mode) -> Option<BnCache<T>> {
    let (b, ch, h, w) = z.dim();
    let n = b * h * w;
    let eps: T = cast(eps);
    let (mean, var) = match mode {
        Mode::Train => {
            let mut mean = Array1::<T>::zeros(ch);
            let mut var = Array1::<T>::zeros(ch);
            for c in 0..ch {
                let v = z.index_axis(Axis(1), c);
                let m = v.sum() / T::from_usize(n).unwrap();
                let s = v.fold(T::zero(), |acc, &x| acc + (x - m) * (x - m));
                mean[c] = m;
                var[c] = s / T::from_usize(n).unwrap();
            }
            (mean, var)
        }
        Mode::Eval => (bn.running_mean.clone(), bn.running_var.clone()),
    };
    let inv_std = var.mapv(|v| T::one() / (v + eps).sqrt());
    let mut xhat = (mode == Mode::Train).then(|| Array4::<T>::zeros((b, ch, h, w)));
    for i in 0..b {
        for c in 0..ch {
            let (m, is, gm, bt) = (mean[c], inv_std[c], bn.gamma[c], bn.beta[c]);
            let mut zc = z.slice_mut(s![i, c, .., ..]);
            match &mut xhat {
                Some(xh) => {
                    let mut xc = xh.slice_mut(s![i, c, .., ..]);
                    ndarray::Zip::from(&mut zc).and(&mut xc).for_each(|zv, xv| {
                        let nv = (*zv - m) * is;
                        *xv = nv;
                        let y = gm * nv + bt;
                        *zv = if y > T::zero() { y } else { T::zero() };
                    });
                }
                None => zc.mapv_inplace(|zv| {
                    let y = gm * (zv - m) * is + bt;
                    if y > T::zero() {
                        y
                    } else {
                        T::zero()
                    }
                }),
            }
        }
    }
    xhat.map(|xhat| BnCache {
        xhat,
        inv_std,
        mean,
        var,
        count: n,
    })
}

/// Given `g = dL/d relu_out` and the relu output, returns `dL/dz` and
/// writes `dgamma`, `dbeta`.
fn bn_relu_backward<T: Real>(
    mut g: Array4<T>,
    out: &Array4<T>,
    bc: &BnCache<T>,
    gamma: &Array1<T>,
) -> (Array4<T>, Array1<T>, Array1<T>) {
    ndarray::Zip::from(&mut g).and(out).for_each(|gv, &o| {
        if o <= T::zero() {
            *gv = T::zero();
        }
    });
    let ch = g.dim().1;
    let n = T::from_usize(bc.count).unwrap();
    let mut dgamma = Array1::<T>::zeros(ch);
    let mut dbeta = Array1::<T>::zeros(ch);
    for c in 0..ch {
        let gc = g.index_axis(Axis(1), c);
        let xc = bc.xhat.index_axis(Axis(1), c);
        dbeta[c] = gc.sum();
        dgamma[c] = ndarray::Zip::from(&gc).and(&xc).fold(T::zero(), |acc, &a, &b| acc + a * b);
    }
    for c in 0..ch {
        let scale = gamma[c] * bc.inv_std[c] / n;
        let (sum_dy, sum_dyx) = (dbeta[c], dgamma[c]);
        let mut gc = g.index_axis_mut(Axis(1), c);
        let xc = bc.xhat.index_axis(Axis(1), c);
        ndarray::Zip::from(&mut gc).and(&xc).for_each(|gv, &xv| {
            *gv = scale * (n * *gv - sum_dy - xv * sum_dyx);
        });
    }
    (g, dgamma, dbeta)
}

fn maxpool_forward<T: Real>(x: &Array4<T>, g: &ConvGeom) -> (Array4<T>, Vec<u32>) {
    let (b, ch, _, _) = x.dim();
    let mut out = Array4::<T>::zeros((b, ch, g.out_h, g.out_w));
    let mut argmax = Vec::with_capacity(b * ch * g.p());
    // Valid kernel offsets per output row/column: (first, end, input index of first).
    let window = |o: usize, s: usize, p: usize, k: usize, n: usize| {
        let first = p.saturating_sub(o * s);
        let end = (n + p).saturating_sub(o * s).min(k);
        (first, end.max(first), (o * s + first).saturating_sub(p))
    };
    let rows: Vec<_> = (0..g.out_h).map(|oh| window(oh, g.sh, g.ph, g.kh, g.in_h)).collect();
    let cols: Vec<_> = (0..g.out_w).map(|ow| window(ow, g.sw, g.pw, g.kw, g.in_w)).collect();
    let xs = x.as_slice().expect("standard layout");
    let outs = out.as_slice_mut().expect("standard layout");
    let plane_len = g.in_h * g.in_w;
    for (bc, op) in outs.chunks_mut(g.p().max(1)).enumerate() {
        let plane = &xs[bc * plane_len..(bc + 1) * plane_len];
        for (oh, &(ki0, ki1, ih0)) in rows.iter().enumerate() {
            for (ow, &(kj0, kj1, iw0)) in cols.iter().enumerate() {
                let mut best = T::neg_infinity();
                let mut best_idx = 0usize;
                for ih in ih0..ih0 + (ki1 - ki0) {
                    let row = ih * g.in_w;
                    for idx in row + iw0..row + iw0 + (kj1 - kj0) {
                        if plane[idx] > best {
                            best = plane[idx];
                            best_idx = idx;
                        }
                    }
                }
                op[oh * g.out_w + ow] = best;
                argmax.push(best_idx as u32);
            }
        }
    }
    (out, argmax)
}

fn maxpool_backward<T: Real>(dout: &Array4<T>, argmax: &[u32], in_dim: (usize, usize, usize, usize)) -> Array4<T> {
    let (b, ch, h, w) = in_dim;
    let mut dx = Array4::<T>::zeros(in_dim);
    let dxs = dx.as_slice_mut().unwrap();
    let plane = h * w;
    let ds = dout.as_slice().expect("standard layout");
    let per = ds.len() / (b * ch).max(1);
    for (bc, chunk) in ds.chunks(per).enumerate() {
        let base = bc * plane;
        for (j, &g) in chunk.iter().enumerate() {
            let idx = base + argmax[bc * per + j] as usize;
            dxs[idx] = dxs[idx] + g;
        }
    }
    dx
}

fn avgpool_forward<T: Real>(x: &Array4<T>) -> Array4<T> {
    let (b, ch, h, w) = x.dim();
    let n = T::from_usize(h * w).unwrap();
    let mut out = Array4::<T>::zeros((b, ch, 1, 1));
    for i in 0..b {
        for c in 0..ch {
            out[[i, c, 0, 0]] = x.slice(s![i, c, .., ..]).sum() / n;
        }
    }
    out
}

fn avgpool_backward<T: Real>(dout: &Array4<T>, in_dim: (usize, usize, usize, usize)) -> Array4<T> {
    let (b, ch, h, w) = in_dim;
    let n = T::from_usize(h * w).unwrap();
    let mut dx = Array4::<T>::zeros(in_dim);
    for i in 0..b {
        for c in 0..ch {
            let g = dout[[i, c, 0, 0]] / n;
            dx.slice_mut(s![i, c, .., ..]).fill(g);
        }
    }
    dx
}

/// Runs the network on a `(batch, freq, time)` input.
///
/// Train mode normalizes with batch statistics and needs at least two
/// items; eval mode uses the running statistics.
pub fn forward<T: Real>(params: &ModelParams<T>, batch: &ndarray::Array3<T>, mode: Mode) -> Result<(Array2<T>, ForwardCache<T>)> {
    let cfg = &params.config;
    let (b, h, f) = batch.dim();
    if b == 0 {
        return Err(Error::Empty("empty batch".into()));
    }
    if mode == Mode::Train && b < 2 {
        return Err(Error::InvalidArgument("train-mode batch norm needs at least 2 items".into()));
    }
    if h != cfg.input_height {
        return Err(Error::Shape(format!("input height {h}, expected {}", cfg.input_height)));
    }
    let min = min_width(cfg)?;
    if f < min {
        return Err(Error::WidthTooSmall { width: f, min });
    }
    if batch.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("network input".into()));
    }
    let x0 = batch
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((b, 1, h, f))
        .expect("standard layout");
    let mut acts = Vec::with_capacity(cfg.layers.len() + 1);
    let mut caches = Vec::with_capacity(cfg.layers.len());
    acts.push(x0);
    for (i, spec) in cfg.layers.iter().enumerate() {
        let x = acts.last().unwrap();
        let (y, lc) = match spec {
            LayerSpec::Conv { .. } => {
                let p = params.layers[i].as_ref().expect("conv params");
                let geom = conv_geom_for(spec, x)?;
                let mut z = conv_forward(x, p, &geom);
                let bn = match &p.bn {
                    Some(bn) => bn_relu_forward(&mut z, bn, cfg.bn_eps, mode),
                    None => None,
                };
                (z, LayerCache::Conv { bn })
            }
            LayerSpec::MaxPool { .. } => {
                let geom = conv_geom_for(spec, x)?;
                let (y, argmax) = maxpool_forward(x, &geom);
                (y, LayerCache::MaxPool { argmax })
            }
            LayerSpec::AvgPool { .. } => (avgpool_forward(x), LayerCache::AvgPool),
        };
        acts.push(y);
        caches.push(lc);
    }
    let out = acts.last().unwrap();
    let (ob, oc, oh, ow) = out.dim();
    if oh != 1 || ow != 1 {
        return Err(Error::Shape(format!("network output is {oh}x{ow}, expected 1x1")));
    }
    let logits = out.clone().into_shape_with_order((ob, oc)).unwrap();
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("network output".into()));
    }
    Ok((
        logits,
        ForwardCache {
            mode,
            generation: params.generation,
            acts,
            layers: caches,
        },
    ))
}

fn conv_geom_for<T: Real>(spec: &LayerSpec, x: &Array4<T>) -> Result<ConvGeom> {
    let (_, c, h, w) = x.dim();
    match spec {
        LayerSpec::Conv { kernel, stride, pad, .. } | LayerSpec::MaxPool { kernel, stride, pad, .. } => {
            ConvGeom::new((c, h, w), *kernel, *stride, *pad)
        }
        LayerSpec::AvgPool { .. } => Err(Error::InvalidArgument("average pool has no kernel".into())),
    }
}

/// Eval-mode logits without keeping a cache around.
pub fn predict<T: Real>(params: &ModelParams<T>, batch: &ndarray::Array3<T>) -> Result<Array2<T>> {
    Ok(forward(params, batch, Mode::Eval)?.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads<T> {
    pub weight: Array4<T>,
    pub bias: Option<Array1<T>>,
    pub gamma: Option<Array1<T>>,
    pub beta: Option<Array1<T>>,
}

/// Gradients of every trainable tensor, laid out like [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub layers: Vec<Option<ConvGrads<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Same order and names as [`ModelParams::trainable_mut`].
    pub fn tensors(&self, cfg: &StudentConfig) -> Vec<(String, &[T])> {
        let mut out = Vec::new();
        for (spec, layer) in cfg.layers.iter().zip(&self.layers) {
            let Some(g) = layer else { continue };
            let name = spec.name();
            out.push((format!("{name}.weight"), g.weight.as_slice().unwrap()));
            if let Some(b) = &g.bias {
                out.push((format!("{name}.bias"), b.as_slice().unwrap()));
            }
            if let (Some(gm), Some(bt)) = (&g.gamma, &g.beta) {
                out.push((format!("{name}.bn.gamma"), gm.as_slice().unwrap()));
                out.push((format!("{name}.bn.beta"), bt.as_slice().unwrap()));
            }
        }
        out
    }

    pub fn is_all_zero(&self) -> bool {
        self.layers.iter().flatten().all(|g| {
            g.weight.iter().all(|v| v.is_zero())
                && g.bias.iter().flatten().all(|v| v.is_zero())
                && g.gamma.iter().flatten().all(|v| v.is_zero())
                && g.beta.iter().flatten().all(|v| v.is_zero())
        })
    }
}

/// Gradients of `sum(logits * grad_logits)` with respect to every trainable
/// tensor, given the cache of a train-mode forward on the same parameters.
pub fn backward<T: Real>(params: &ModelParams<T>, cache: &ForwardCache<T>, grad_logits: &Array2<T>) -> Result<Gradients<T>> {
    if cache.mode != Mode::Train {
        return Err(Error::InvalidArgument("backward needs a train-mode cache".into()));
    }
    if cache.generation != params.generation {
        return Err(Error::InvalidArgument(format!(
            "stale cache: produced at parameter generation {}, now {}",
            cache.generation, params.generation
        )));
    }
    let cfg = &params.config;
    let out = cache.acts.last().unwrap();
    let (b, oc, _, _) = out.dim();
    if grad_logits.dim() != (b, oc) {
        return Err(Error::Shape(format!("grad_logits {:?}, expected ({b}, {oc})", grad_logits.dim())));
    }
    let mut g = grad_logits.as_standard_layout().into_owned().into_shape_with_order((b, oc, 1, 1)).unwrap();
    let mut grads: Vec<Option<ConvGrads<T>>> = vec![None; cfg.layers.len()];
    for i in (0..cfg.layers.len()).rev() {
        let x = &cache.acts[i];
        let y = &cache.acts[i + 1];
        let need_dx = i > 0;
        match (&cfg.layers[i], &cache.layers[i]) {
            (spec @ LayerSpec::Conv { .. }, LayerCache::Conv { bn }) => {
                let p = params.layers[i].as_ref().expect("conv params");
                let (dz, gamma, beta) = match (bn, &p.bn) {
                    (Some(bc), Some(bp)) => {
                        let (dz, dg, db) = bn_relu_backward(g, y, bc, &bp.gamma);
                        (dz, Some(dg), Some(db))
                    }
                    _ => (g, None, None),
                };
                let geom = conv_geom_for(spec, x)?;
                let (dw, dbias, dx) = conv_backward(x, &dz, p, &geom, need_dx);
                grads[i] = Some(ConvGrads {
                    weight: dw,
                    bias: dbias,
                    gamma,
                    beta,
                });
                g = dx.unwrap_or_else(|| Array4::zeros((0, 0, 0, 0)));
            }
            (LayerSpec::MaxPool { .. }, LayerCache::MaxPool { argmax }) => {
                g = maxpool_backward(&g, argmax, x.dim());
            }
            (LayerSpec::AvgPool { .. }, LayerCache::AvgPool) => {
                g = avgpool_backward(&g, x.dim());
            }
            _ => return Err(Error::InvalidArgument("cache does not match config".into())),
        }
    }
    Ok(Gradients { layers: grads })
}
