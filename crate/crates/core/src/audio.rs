//! Audio ingestion and the spectrogram frontend.
//!
//! Waveforms are mono at [`SAMPLE_RATE`]. Spectrograms are linear-magnitude
//! STFTs with a 25 ms Hamming window, 10 ms hop and a 1024-point FFT of
//! which the first 512 bins are kept, so a 4 s clip becomes 512 x 400.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::binio;
use crate::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;
pub const WINDOW_SECONDS: f64 = 0.025;
pub const HOP_SECONDS: f64 = 0.010;
pub const FFT_SIZE: usize = 1024;
pub const FREQ_BINS: usize = 512;
pub const STD_FLOOR: f64 = 1e-5;

const CACHE_MAGIC: &[u8; 4] = b"EVXS";
const CACHE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidArgument("sample rate must be positive".into()));
        }
        if samples.is_empty() {
            return Err(Error::Empty("waveform has no samples".into()));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate)
    }

    pub fn scaled(&self, k: f32) -> Waveform {
        Waveform {
            samples: self.samples.iter().map(|s| s * k).collect(),
            sample_rate: self.sample_rate,
        }
    }
}

/// Reads a PCM WAV file (16-bit integer or 32-bit float), averages channels
/// and linearly resamples to `target_rate`.
pub fn load_audio(path: &Path, target_rate: u32) -> Result<Waveform> {
    if target_rate == 0 {
        return Err(Error::InvalidArgument("target rate must be positive".into()));
    }
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = hound::WavReader::new(BufReader::new(file)).map_err(wav_err)?;
    let spec = reader.spec();
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| f32::from(v) / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(wav_err)?,
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(wav_err)?,
        (fmt, bits) => {
            return Err(Error::UnsupportedEncoding(format!(
                "{fmt:?} with {bits} bits per sample in {}",
                path.display()
            )))
        }
    };
    let channels = usize::from(spec.channels.max(1));
    let mono = downmix(&interleaved, channels);
    if mono.is_empty() {
        return Err(Error::Empty(format!("{} contains no audio", path.display())));
    }
    let samples = resample_linear(&mono, spec.sample_rate, target_rate);
    Waveform::new(samples, target_rate)
}

fn downmix(interleaved: &[f32], channels: usize) -> Vec<f32> {
    if channels == 1 {
        return interleaved.to_vec();
    }
    interleaved
        .chunks_exact(channels)
        .map(|frame| frame.iter().sum::<f32>() / channels as f32)
        .collect()
}

/// Linear interpolation resampler. Output length is
/// `round(len * to / from)`; output sample `i` sits at input position
/// `i * from / to`.
pub fn resample_linear(input: &[f32], from: u32, to: u32) -> Vec<f32> {
    if from == to || input.is_empty() {
        return input.to_vec();
    }
    let ratio = f64::from(from) / f64::from(to);
    let out_len = ((input.len() as f64) / ratio).round().max(1.0) as usize;
    let last = input.len() - 1;
    (0..out_len)
        .map(|i| {
            let pos = i as f64 * ratio;
            let i0 = (pos.floor() as usize).min(last);
            let i1 = (i0 + 1).min(last);
            let frac = (pos - i0 as f64) as f32;
            input[i0] + (input[i1] - input[i0]) * frac
        })
        .collect()
}

/// Writes 16-bit PCM mono.
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = hound::WavWriter::new(BufWriter::new(file), spec).map_err(wav_err)?;
    for &s in &w.samples {
        let v = (f64::from(s) * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(v).map_err(wav_err)?;
    }
    writer.finalize().map_err(wav_err)
}

/// A fixed-length excerpt and where it starts in the source.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub waveform: Waveform,
    /// First source sample of the crop; 0 when the source was padded.
    pub start: usize,
}

fn segment_len(w: &Waveform, duration_s: f64) -> Result<usize> {
    if !(duration_s.is_finite() && duration_s > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "segment duration must be positive, got {duration_s}"
        )));
    }
    Ok((duration_s * f64::from(w.sample_rate)).round().max(1.0) as usize)
}

/// Crops `duration_s` starting at `start`, zero-padding the tail if the
/// source runs out.
pub fn segment_at(w: &Waveform, duration_s: f64, start: usize) -> Result<Segment> {
    let len = segment_len(w, duration_s)?;
    let start = start.min(w.len());
    let end = (start + len).min(w.len());
    let mut samples = Vec::with_capacity(len);
    samples.extend_from_slice(&w.samples[start..end]);
    samples.resize(len, 0.0);
    Ok(Segment {
        waveform: Waveform {
            samples,
            sample_rate: w.sample_rate,
        },
        start,
    })
}

/// Uniformly random contiguous crop of `duration_s`; shorter inputs are
/// returned whole followed by zeros.
pub fn sample_segment_with_offset<R: Rng + ?Sized>(
    w: &Waveform,
    duration_s: f64,
    rng: &mut R,
) -> Result<Segment> {
    let len = segment_len(w, duration_s)?;
    let start = if w.len() > len {
        rng.random_range(0..=w.len() - len)
    } else {
        0
    };
    segment_at(w, duration_s, start)
}

pub fn sample_segment<R: Rng + ?Sized>(w: &Waveform, duration_s: f64, rng: &mut R) -> Result<Waveform> {
    Ok(sample_segment_with_offset(w, duration_s, rng)?.waveform)
}

/// A `512 x F` magnitude spectrogram; rows are frequency bins, columns
/// are 10 ms frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub values: Array2<f32>,
}

impl Spectrogram {
    pub fn new(values: Array2<f32>) -> Result<Self> {
        if values.nrows() != FREQ_BINS {
            return Err(Error::Shape(format!(
                "spectrogram must have {FREQ_BINS} rows, got {}",
                values.nrows()
            )));
        }
        Ok(Self { values })
    }

    pub fn frames(&self) -> usize {
        self.values.ncols()
    }

    pub fn write_cache(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        use std::io::Write;
        w.write_all(CACHE_MAGIC)?;
        binio::write_u32(&mut w, CACHE_VERSION)?;
        binio::write_u32(&mut w, binio::len_u32(self.values.nrows())?)?;
        binio::write_u32(&mut w, binio::len_u32(self.values.ncols())?)?;
        binio::write_f32s(&mut w, self.values.iter().copied())?;
        w.flush()?;
        Ok(())
    }

    pub fn read_cache(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        binio::expect_header(&mut r, CACHE_MAGIC, CACHE_VERSION)?;
        let rows = binio::read_u32(&mut r, "rows")? as usize;
        let cols = binio::read_u32(&mut r, "cols")? as usize;
        if rows != FREQ_BINS {
            return Err(Error::Format(format!("cache has {rows} rows, expected {FREQ_BINS}")));
        }
        let data = binio::read_f32s(&mut r, rows * cols, "spectrogram payload")?;
        binio::expect_eof(&mut r)?;
        let values = Array2::from_shape_vec((rows, cols), data)
            .map_err(|e| Error::Format(e.to_string()))?;
        Spectrogram::new(values)
    }
}

/// Reusable STFT state: the FFT plan and the window.
pub struct SpectrogramExtractor {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    sample_rate: u32,
    win_len: usize,
    hop: usize,
}

impl SpectrogramExtractor {
    pub fn new(sample_rate: u32) -> Result<Self> {
        let win_len = (WINDOW_SECONDS * f64::from(sample_rate)).round() as usize;
        let hop = (HOP_SECONDS * f64::from(sample_rate)).round() as usize;
        if win_len == 0 || hop == 0 || win_len > FFT_SIZE {
            return Err(Error::InvalidArgument(format!(
                "sample rate {sample_rate} gives window {win_len} / hop {hop} incompatible with a {FFT_SIZE}-point FFT"
            )));
        }
        let window = hamming(win_len);
        let fft = FftPlanner::new().plan_fft_forward(FFT_SIZE);
        Ok(Self {
            fft,
            window,
            sample_rate,
            win_len,
            hop,
        })
    }

    /// Number of frames for `n` samples: `round(n / hop)`.
    pub fn frame_count(&self, n: usize) -> usize {
        (n + self.hop / 2) / self.hop
    }

    pub fn compute(&self, w: &Waveform) -> Result<Spectrogram> {
        if w.sample_rate != self.sample_rate {
            return Err(Error::InvalidArgument(format!(
                "waveform at {} Hz, extractor at {} Hz",
                w.sample_rate, self.sample_rate
            )));
        }
        if w.len() < self.win_len {
            return Err(Error::InvalidArgument(format!(
                "waveform of {} samples is shorter than one {}-sample window",
                w.len(),
                self.win_len
            )));
        }
        let frames = self.frame_count(w.len());
        // Frame f covers source samples [f*hop - pad, f*hop - pad + win);
        // anything outside the waveform reads as zero.
        let pad = (self.win_len - self.hop) / 2;
        let mut values = Array2::<f32>::zeros((FREQ_BINS, frames));
        let mut buf = vec![Complex::new(0.0, 0.0); FFT_SIZE];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        for f in 0..frames {
            buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
            let origin = (f * self.hop) as isize - pad as isize;
            for (i, wv) in self.window.iter().enumerate() {
                let idx = origin + i as isize;
                if idx >= 0 && (idx as usize) < w.len() {
                    buf[i].re = f64::from(w.samples[idx as usize]) * wv;
                }
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (k, c) in buf.iter().take(FREQ_BINS).enumerate() {
                values[[k, f]] = c.norm() as f32;
            }
        }
        Ok(Spectrogram { values })
    }
}

fn hamming(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    let denom = (n - 1) as f64;
    (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / denom).cos())
        .collect()
}

pub fn compute_spectrogram(w: &Waveform) -> Result<Spectrogram> {
    SpectrogramExtractor::new(w.sample_rate)?.compute(w)
}

/// Per-frequency-bin mean and standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizationStats {
    pub mean: Array1<f32>,
    pub std: Array1<f32>,
}

impl NormalizationStats {
    pub fn new(mean: Array1<f32>, std: Array1<f32>) -> Result<Self> {
        if mean.len() != FREQ_BINS || std.len() != FREQ_BINS {
            return Err(Error::Shape(format!(
                "normalization stats need {FREQ_BINS} entries, got {} / {}",
                mean.len(),
                std.len()
            )));
        }
        if std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::InvalidArgument("std entries must be positive".into()));
        }
        Ok(Self { mean, std })
    }
}

/// Running per-bin moments, so statistics can be accumulated without
/// holding every spectrogram in memory.
#[derive(Debug, Clone)]
pub struct NormalizationAccumulator {
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
    count: u64,
}

impl Default for NormalizationAccumulator {
    fn default() -> Self {
        Self {
            sum: vec![0.0; FREQ_BINS],
            sum_sq: vec![0.0; FREQ_BINS],
            count: 0,
        }
    }
}

impl NormalizationAccumulator {
    pub fn add(&mut self, spec: &Spectrogram) {
        for (k, row) in spec.values.axis_iter(Axis(0)).enumerate() {
            for &v in row {
                let v = f64::from(v);
                self.sum[k] += v;
                self.sum_sq[k] += v * v;
            }
        }
        self.count += spec.frames() as u64;
    }

    pub fn finish(&self) -> Result<NormalizationStats> {
        if self.count == 0 {
            return Err(Error::Empty("no spectrogram frames to fit normalization".into()));
        }
        let n = self.count as f64;
        let mut mean = Array1::zeros(FREQ_BINS);
        let mut std = Array1::zeros(FREQ_BINS);
        for k in 0..FREQ_BINS {
            let m = self.sum[k] / n;
            let var = (self.sum_sq[k] / n - m * m).max(0.0);
            mean[k] = m as f32;
            std[k] = var.sqrt().max(STD_FLOOR) as f32;
        }
        Ok(NormalizationStats { mean, std })
    }
}

/// Pooled per-bin mean and population standard deviation over all frames of
/// all inputs.
pub fn fit_normalization(specs: &[Spectrogram]) -> Result<NormalizationStats> {
    if specs.is_empty() {
        return Err(Error::Empty("fit_normalization needs at least one spectrogram".into()));
    }
    // Two passes in f64 keep the variance accurate for large offsets.
    let total: usize = specs.iter().map(Spectrogram::frames).sum();
    if total == 0 {
        return Err(Error::Empty("spectrograms have no frames".into()));
    }
    let n = total as f64;
    let mut mean = vec![0.0f64; FREQ_BINS];
    for s in specs {
        for (k, row) in s.values.axis_iter(Axis(0)).enumerate() {
            mean[k] += row.iter().map(|&v| f64::from(v)).sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0f64; FREQ_BINS];
    for s in specs {
        for (k, row) in s.values.axis_iter(Axis(0)).enumerate() {
            var[k] += row
                .iter()
                .map(|&v| (f64::from(v) - mean[k]).powi(2))
                .sum::<f64>();
        }
    }
    Ok(NormalizationStats {
        mean: mean.iter().map(|&m| m as f32).collect(),
        std: var
            .iter()
            .map(|&v| (v / n).sqrt().max(STD_FLOOR) as f32)
            .collect(),
    })
}

/// `(x - mean_bin) / std_bin` row by row.
pub fn normalize(spec: &Spectrogram, stats: &NormalizationStats) -> Spectrogram {
    let mut values = spec.values.clone();
    for (k, mut row) in values.axis_iter_mut(Axis(0)).enumerate() {
        let m = f64::from(stats.mean[k]);
        let s = f64::from(stats.std[k]);
        row.mapv_inplace(|v| ((f64::from(v) - m) / s) as f32);
    }
    Spectrogram { values }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn sine(freq: f64, rate: u32, n: usize) -> Vec<f32> {
        (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / f64::from(rate)).sin() as f32 * 0.5)
            .collect()
    }

    #[test]
    fn segment_pads_short_input() {
        let w = Waveform::new(vec![0.25; 32_000], SAMPLE_RATE).unwrap();
        let mut r = rng::substream(1, "t");
        let s = sample_segment(&w, 4.0, &mut r).unwrap();
        assert_eq!(s.len(), 64_000);
        assert!(s.samples[..32_000].iter().all(|&v| v == 0.25));
        assert!(s.samples[32_000..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn segment_identity_and_determinism() {
        let mut r = rng::substream(1, "t");
        let w = Waveform::new(sine(440.0, SAMPLE_RATE, 64_000), SAMPLE_RATE).unwrap();
        assert_eq!(sample_segment(&w, 4.0, &mut r).unwrap(), w);

        let long = Waveform::new(
            (0..160_000).map(|i| i as f32 / 160_000.0).collect(),
            SAMPLE_RATE,
        )
        .unwrap();
        let a = sample_segment_with_offset(&long, 4.0, &mut rng::substream(9, "s")).unwrap();
        let b = sample_segment_with_offset(&long, 4.0, &mut rng::substream(9, "s")).unwrap();
        assert_eq!(a, b);
        assert_eq!(&a.waveform.samples[..], &long.samples[a.start..a.start + 64_000]);
        assert!(sample_segment(&long, 0.0, &mut r).is_err());
    }

    #[test]
    fn spectrogram_shapes() {
        let w = Waveform::new(sine(1000.0, SAMPLE_RATE, 64_000), SAMPLE_RATE).unwrap();
        let s = compute_spectrogram(&w).unwrap();
        assert_eq!(s.values.dim(), (512, 400));
        let w2 = Waveform::new(sine(1000.0, SAMPLE_RATE, 32_000), SAMPLE_RATE).unwrap();
        assert_eq!(compute_spectrogram(&w2).unwrap().values.dim(), (512, 200));
        let z = Waveform::new(vec![0.0; 64_000], SAMPLE_RATE).unwrap();
        assert!(compute_spectrogram(&z).unwrap().values.iter().all(|&v| v == 0.0));
        let short = Waveform::new(vec![0.0; 399], SAMPLE_RATE).unwrap();
        assert!(compute_spectrogram(&short).is_err());
    }

    #[test]
    fn frame_count_law() {
        let ex = SpectrogramExtractor::new(SAMPLE_RATE).unwrap();
        for tenths_of_10ms in [4usize, 10, 57, 100, 333, 400, 801] {
            let n = tenths_of_10ms * 160;
            let w = Waveform::new(vec![0.1; n], SAMPLE_RATE).unwrap();
            assert_eq!(ex.compute(&w).unwrap().frames(), tenths_of_10ms);
        }
    }

    #[test]
    fn tone_peaks_at_expected_bin() {
        // 1 kHz at 16 kHz with a 1024-point FFT sits at bin 64.
        let w = Waveform::new(sine(1000.0, SAMPLE_RATE, 16_000), SAMPLE_RATE).unwrap();
        let s = compute_spectrogram(&w).unwrap();
        let col = s.values.column(50);
        let argmax = col
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert_eq!(argmax, 64);
    }

    #[test]
    fn normalization_reference_cases() {
        let c = Spectrogram::new(Array2::from_elem((512, 10), 3.0)).unwrap();
        let st = fit_normalization(&[c.clone()]).unwrap();
        assert!(st.mean.iter().all(|&m| m == 3.0));
        assert!(st.std.iter().all(|&s| s == STD_FLOOR as f32));
        assert!(normalize(&c, &st).values.iter().all(|&v| v == 0.0));

        let a = Spectrogram::new(Array2::zeros((512, 5))).unwrap();
        let b = Spectrogram::new(Array2::from_elem((512, 5), 2.0)).unwrap();
        let st = fit_normalization(&[a.clone(), b.clone()]).unwrap();
        assert!(st.mean.iter().all(|&m| m == 1.0));
        assert!(st.std.iter().all(|&s| s == 1.0));

        let mut acc = NormalizationAccumulator::default();
        acc.add(&a);
        acc.add(&b);
        assert_eq!(acc.finish().unwrap(), st);

        assert!(fit_normalization(&[]).is_err());
        assert!(NormalizationAccumulator::default().finish().is_err());
    }

    #[test]
    fn normalization_is_idempotent() {
        let mut r = rng::substream(3, "spec");
        let values = Array2::from_shape_fn((512, 40), |_| r.random_range(0.0f32..5.0));
        let s = Spectrogram::new(values).unwrap();
        let once = normalize(&s, &fit_normalization(&[s.clone()]).unwrap());
        let twice = normalize(&once, &fit_normalization(&[once.clone()]).unwrap());
        for (a, b) in once.values.iter().zip(twice.values.iter()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn downmix_and_resample() {
        assert_eq!(downmix(&[1.0, 3.0, -1.0, 1.0], 2), vec![2.0, 0.0]);
        let x = sine(300.0, 32_000, 128_000);
        let y = resample_linear(&x, 32_000, 16_000);
        assert_eq!(y.len(), 64_000);
        for (i, v) in y.iter().enumerate() {
            assert_eq!(*v, x[2 * i]);
        }
    }

    #[test]
    fn cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.evxs");
        let mut r = rng::substream(5, "c");
        let s = Spectrogram::new(Array2::from_shape_fn((512, 7), |_| r.random::<f32>())).unwrap();
        s.write_cache(&p).unwrap();
        assert_eq!(Spectrogram::read_cache(&p).unwrap(), s);
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"EVXS");
        assert_eq!(bytes.len(), 16 + 512 * 7 * 4);
        std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(Spectrogram::read_cache(&p).is_err());
    }
}
