//! Teacher-side data: manifests, frame-logit files, and a synthetic teacher.
//!
//! A manifest is JSON lines, one [`TrackRecord`] per speaking face-track.
//! Relative paths inside it are resolved against the manifest's directory.
//!
//! Frame logits live in one `EVXL` file per track:
//!
//! ```text
//! "EVXL" | u32 version = 1 | u32 num_frames | u32 num_emotions = 8 | f32[num_frames * 8]
//! ```
//!
//! all little-endian, rows in canonical emotion order.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::aggregation::{FrameLogitsTrack, FRAME_INTERVAL_S};
use crate::audio::{self, Waveform, SAMPLE_RATE};
use crate::binio;
use crate::distill::{EmotionLogits, NUM_EMOTIONS};
use crate::rng;
use crate::{Error, Result};

const LOGITS_MAGIC: &[u8; 4] = b"EVXL";
const LOGITS_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    HeardVal,
    UnheardVal,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::HeardVal, Split::UnheardVal];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::HeardVal => "heard_val",
            Split::UnheardVal => "unheard_val",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown split `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackRecord {
    pub track_id: String,
    pub identity_id: String,
    pub split: Split,
    pub audio_path: PathBuf,
    pub logits_path: PathBuf,
    pub num_frames: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Manifest {
    pub records: Vec<TrackRecord>,
    /// Directory relative paths are resolved against.
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn new(records: Vec<TrackRecord>, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let m = Self {
            records,
            base_dir: base_dir.into(),
        };
        m.validate()?;
        Ok(m)
    }

    /// Checks unique track ids, positive frame counts, and that no identity
    /// appears in both train and unheard_val.
    pub fn validate(&self) -> Result<()> {
        if self.records.is_empty() {
            return Err(Error::Empty("manifest has no records".into()));
        }
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert(r.track_id.as_str()) {
                return Err(Error::DuplicateTrack(r.track_id.clone()));
            }
            if r.num_frames == 0 {
                return Err(Error::InvalidArgument(format!("track `{}` has zero frames", r.track_id)));
            }
        }
        let mut train_ids: HashMap<&str, &str> = HashMap::new();
        for r in self.records.iter().filter(|r| r.split == Split::Train) {
            train_ids.entry(r.identity_id.as_str()).or_insert(r.track_id.as_str());
        }
        for r in self.records.iter().filter(|r| r.split == Split::UnheardVal) {
            if let Some(t) = train_ids.get(r.identity_id.as_str()) {
                return Err(Error::IdentityLeakage {
                    identity: r.identity_id.clone(),
                    train_track: (*t).to_string(),
                    unheard_track: r.track_id.clone(),
                });
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> Vec<&TrackRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn split_counts(&self) -> [usize; 3] {
        let mut c = [0; 3];
        for r in &self.records {
            c[r.split as usize] += 1;
        }
        c
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn load_audio(&self, r: &TrackRecord) -> Result<Waveform> {
        audio::load_audio(&self.resolve(&r.audio_path), SAMPLE_RATE)
    }

    /// Reads the track's logits file and checks it against the record.
    pub fn load_frame_logits(&self, r: &TrackRecord) -> Result<FrameLogitsTrack> {
        let frames = read_logits_file(&self.resolve(&r.logits_path))?;
        if frames.len() != r.num_frames as usize {
            return Err(Error::Format(format!(
                "track `{}`: logits file has {} frames, manifest says {}",
                r.track_id,
                frames.len(),
                r.num_frames
            )));
        }
        FrameLogitsTrack::new(r.track_id.clone(), frames)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r)?);
            s.push('\n');
        }
        Ok(s)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()?).map_err(|e| Error::io(path, e))
    }
}

/// Parses and validates a JSON-lines manifest. Blank lines are skipped.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: TrackRecord = serde_json::from_str(&line).map_err(|e| Error::Manifest {
            line: i + 1,
            message: e.to_string(),
        })?;
        records.push(r);
    }
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Manifest::new(records, base)
}

pub fn write_logits_file(path: &Path, frames: &[EmotionLogits]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(LOGITS_MAGIC)?;
    binio::write_u32(&mut w, LOGITS_VERSION)?;
    binio::write_u32(&mut w, binio::len_u32(frames.len())?)?;
    binio::write_u32(&mut w, NUM_EMOTIONS as u32)?;
    binio::write_f32s(&mut w, frames.iter().flat_map(|f| f.0.map(|v| v as f32)))?;
    w.flush()?;
    Ok(())
}

pub fn read_logits_file(path: &Path) -> Result<Vec<EmotionLogits>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    binio::expect_header(&mut r, LOGITS_MAGIC, LOGITS_VERSION)?;
    let n = binio::read_u32(&mut r, "num_frames")? as usize;
    let k = binio::read_u32(&mut r, "num_emotions")? as usize;
    if k != NUM_EMOTIONS {
        return Err(Error::Format(format!("{k} emotions per frame, expected {NUM_EMOTIONS}")));
    }
    let data = binio::read_f32s(&mut r, n * k, "logits payload")?;
    binio::expect_eof(&mut r)?;
    data.chunks_exact(k)
        .map(|c| {
            let v: Vec<f64> = c.iter().map(|&x| f64::from(x)).collect();
            EmotionLogits::from_slice(&v)
        })
        .collect()
}

/// A band-energy teacher: logit `i` of a frame is `gain` times the share of
/// frame energy falling in band `i`, plus Gaussian noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTeacherSpec {
    /// `[lo, hi)` in Hz, one per emotion in canonical order.
    pub bands: [(f64, f64); NUM_EMOTIONS],
    pub gain: f64,
    pub noise_level: f64,
}

impl Default for SyntheticTeacherSpec {
    fn default() -> Self {
        Self {
            bands: [
                (200.0, 400.0),
                (400.0, 650.0),
                (650.0, 950.0),
                (950.0, 1300.0),
                (1300.0, 1750.0),
                (1750.0, 2300.0),
                (2300.0, 3000.0),
                (3000.0, 3800.0),
            ],
            gain: 4.0,
            noise_level: 0.1,
        }
    }
}

impl SyntheticTeacherSpec {
    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        let nyquist = f64::from(sample_rate) / 2.0;
        let mut sorted = self.bands.to_vec();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
        for (lo, hi) in &sorted {
            if !(0.0 <= *lo && lo < hi && *hi <= nyquist) {
                return Err(Error::InvalidArgument(format!("band [{lo}, {hi}) invalid for Nyquist {nyquist}")));
            }
        }
        if sorted.windows(2).any(|w| w[0].1 > w[1].0) {
            return Err(Error::InvalidArgument("teacher bands overlap".into()));
        }
        if !(self.gain.is_finite() && self.noise_level >= 0.0 && self.noise_level.is_finite()) {
            return Err(Error::InvalidArgument("invalid gain or noise level".into()));
        }
        Ok(())
    }

    pub fn center(&self, i: usize) -> f64 {
        0.5 * (self.bands[i].0 + self.bands[i].1)
    }
}

/// One logit vector per 0.24 s of audio.
pub fn synthetic_teacher<R: Rng + ?Sized>(spec: &SyntheticTeacherSpec, w: &Waveform, rng: &mut R) -> Result<FrameLogitsTrack> {
    spec.validate(w.sample_rate)?;
    let frame_len = (FRAME_INTERVAL_S * f64::from(w.sample_rate)).round() as usize;
    let n_frames = w.len() / frame_len;
    if n_frames == 0 {
        return Err(Error::InvalidArgument(format!(
            "waveform of {:.3} s is shorter than one {FRAME_INTERVAL_S} s teacher frame",
            w.duration_s()
        )));
    }
    let fft_len = frame_len.next_power_of_two();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(fft_len);
    let hann: Vec<f64> = (0..frame_len)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / frame_len as f64).cos())
        .collect();
    let bin_hz = f64::from(w.sample_rate) / fft_len as f64;
    let band_bins: Vec<(usize, usize)> = spec
        .bands
        .iter()
        .map(|&(lo, hi)| ((lo / bin_hz).ceil() as usize, ((hi / bin_hz).ceil() as usize).min(fft_len / 2 + 1)))
        .collect();
    let noise = (spec.noise_level > 0.0).then(|| Normal::new(0.0, spec.noise_level).expect("finite std"));
    let mut buf = vec![Complex::new(0.0, 0.0); fft_len];
    let mut frames = Vec::with_capacity(n_frames);
    for f in 0..n_frames {
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for (i, (b, h)) in buf.iter_mut().zip(&hann).enumerate() {
            b.re = f64::from(w.samples[f * frame_len + i]) * h;
        }
        fft.process(&mut buf);
        let energies: Vec<f64> = band_bins
            .iter()
            .map(|&(lo, hi)| buf[lo..hi.max(lo)].iter().map(Complex::norm_sqr).sum())
            .collect();
        let total: f64 = energies.iter().sum();
        let mut logits = [0.0; NUM_EMOTIONS];
        for i in 0..NUM_EMOTIONS {
            let share = if total > 1e-20 { energies[i] / total } else { 0.0 };
            logits[i] = spec.gain * share + noise.map_or(0.0, |n| n.sample(rng));
        }
        frames.push(EmotionLogits::new(logits)?);
    }
    FrameLogitsTrack::new(String::new(), frames)
}

/// Parameters of a synthetic tone-mixture corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDatasetConfig {
    pub n_tracks: usize,
    pub n_identities: usize,
    pub teacher: SyntheticTeacherSpec,
    /// Sampling weights of the intended dominant emotion.
    pub emotion_weights: [f64; NUM_EMOTIONS],
    pub min_duration_s: f64,
    pub max_duration_s: f64,
    /// Fraction of identities held out entirely as unheard_val.
    pub unheard_identity_fraction: f64,
    /// Fraction of tracks from the remaining identities kept as heard_val.
    pub heard_val_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticDatasetConfig {
    fn default() -> Self {
        Self {
            n_tracks: 100,
            n_identities: 10,
            teacher: SyntheticTeacherSpec::default(),
            emotion_weights: [0.30, 0.20, 0.12, 0.10, 0.10, 0.06, 0.06, 0.06],
            min_duration_s: 2.0,
            max_duration_s: 8.0,
            unheard_identity_fraction: 0.15,
            heard_val_fraction: 0.1,
            seed: 0,
        }
    }
}

/// Voice characteristics shared by all tracks of one identity. They sit
/// outside the teacher's bands so they carry no label information.
struct Voice {
    f0: f64,
    /// RMS of the high-band breath noise.
    breath_rms: f64,
    /// Spectral slope of the breath noise, as a power of frequency.
    breath_tilt: f64,
}

const BREATH_BAND: (f64, f64) = (4200.0, 7000.0);

/// Gaussian noise confined to `band` with amplitude spectrum `f^tilt`,
/// scaled to the given RMS.
fn band_noise<R: Rng + ?Sized>(n: usize, sample_rate: f64, band: (f64, f64), tilt: f64, rms: f64, rng: &mut R) -> Vec<f64> {
    let len = n.next_power_of_two().max(2);
    let bin_hz = sample_rate / len as f64;
    let mut spec = vec![Complex::new(0.0, 0.0); len];
    let unit = Normal::new(0.0, 1.0).unwrap();
    let lo = (band.0 / bin_hz).ceil() as usize;
    let hi = ((band.1 / bin_hz).floor() as usize).min(len / 2 - 1);
    for k in lo..=hi {
        let a = (k as f64 * bin_hz / band.0).powf(tilt);
        let c = Complex::new(unit.sample(rng), unit.sample(rng)) * a;
        spec[k] = c;
        spec[len - k] = c.conj();
    }
    FftPlanner::<f64>::new().plan_fft_inverse(len).process(&mut spec);
    let out: Vec<f64> = spec[..n].iter().map(|c| c.re).collect();
    let cur = (out.iter().map(|v| v * v).sum::<f64>() / n.max(1) as f64).sqrt();
    if cur > 0.0 {
        out.iter().map(|v| v * rms / cur).collect()
    } else {
        out
    }
}

fn sample_emotion<R: Rng + ?Sized>(weights: &[f64; NUM_EMOTIONS], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    NUM_EMOTIONS - 1
}

fn synth_utterance<R: Rng + ?Sized>(cfg: &SyntheticDatasetConfig, voice: &Voice, emotion: usize, rng: &mut R) -> Waveform {
    let sr = f64::from(SAMPLE_RATE);
    let dur = rng.random_range(cfg.min_duration_s..=cfg.max_duration_s);
    let n = (dur * sr).round() as usize;
    let band = |i: usize, rng: &mut R| {
        let (lo, hi) = cfg.teacher.bands[i];
        let margin = 0.2 * (hi - lo);
        rng.random_range(lo + margin..hi - margin)
    };
    // (freq, amplitude, phase)
    let mut tones = vec![(band(emotion, rng), rng.random_range(0.25..0.4), rng.random_range(0.0..std::f64::consts::TAU))];
    let mut others: Vec<usize> = (0..NUM_EMOTIONS).filter(|&i| i != emotion).collect();
    others.shuffle(rng);
    for &i in others.iter().take(2) {
        tones.push((band(i, rng), rng.random_range(0.03..0.12), rng.random_range(0.0..std::f64::consts::TAU)));
    }
    let f0 = voice.f0 * rng.random_range(0.95..1.05);
    tones.push((f0, 0.15, rng.random_range(0.0..std::f64::consts::TAU)));
    let breath = band_noise(n, sr, BREATH_BAND, voice.breath_tilt, voice.breath_rms, rng);
    let env_rate = rng.random_range(0.5..2.0);
    let env_phase = rng.random_range(0.0..std::f64::consts::TAU);
    let hiss = Normal::new(0.0, 0.005).unwrap();
    let samples = (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            let env = 0.85 + 0.15 * (std::f64::consts::TAU * env_rate * t + env_phase).sin();
            let v: f64 = tones
                .iter()
                .map(|(f, a, ph)| a * (std::f64::consts::TAU * f * t + ph).sin())
                .sum();
            let x = env * v + breath[i] + hiss.sample(rng);
            // Quantize to the 16-bit grid the WAV writer uses.
            ((x * 32768.0).round().clamp(-32768.0, 32767.0) / 32768.0) as f32
        })
        .collect();
    Waveform {
        samples,
        sample_rate: SAMPLE_RATE,
    }
}

/// Writes `manifest.jsonl`, `audio/*.wav` and `logits/*.evxl` under `out_dir`.
pub fn generate_synthetic_dataset(cfg: &SyntheticDatasetConfig, out_dir: &Path) -> Result<Manifest> {
    if cfg.n_identities < 3 {
        return Err(Error::InvalidArgument(format!(
            "need at least 3 identities to populate every split, got {}",
            cfg.n_identities
        )));
    }
    if cfg.n_tracks < cfg.n_identities + 2 {
        return Err(Error::InvalidArgument(format!(
            "{} tracks cannot cover {} identities and all splits",
            cfg.n_tracks, cfg.n_identities
        )));
    }
    if !(0.0 < cfg.min_duration_s && cfg.min_duration_s <= cfg.max_duration_s) {
        return Err(Error::InvalidArgument("invalid duration range".into()));
    }
    if cfg.emotion_weights.iter().any(|w| !(*w >= 0.0)) || cfg.emotion_weights.iter().sum::<f64>() <= 0.0 {
        return Err(Error::InvalidArgument("emotion weights must be non-negative with a positive sum".into()));
    }
    cfg.teacher.validate(SAMPLE_RATE)?;

    let mut top = rng::substream(cfg.seed, rng::STREAM_SYNTH);
    let n_unheard = ((cfg.n_identities as f64 * cfg.unheard_identity_fraction).round() as usize).clamp(1, cfg.n_identities - 2);
    let mut ids: Vec<usize> = (0..cfg.n_identities).collect();
    ids.shuffle(&mut top);
    let unheard: HashSet<usize> = ids[..n_unheard].iter().copied().collect();
    let voices: Vec<Voice> = (0..cfg.n_identities)
        .map(|_| Voice {
            f0: top.random_range(80.0..180.0),
            breath_rms: top.random_range(0.02..0.05),
            breath_tilt: top.random_range(-1.5..1.5),
        })
        .collect();

    std::fs::create_dir_all(out_dir.join("audio")).map_err(|e| Error::io(out_dir, e))?;
    std::fs::create_dir_all(out_dir.join("logits")).map_err(|e| Error::io(out_dir, e))?;

    let mut records = Vec::with_capacity(cfg.n_tracks);
    for i in 0..cfg.n_tracks {
        let mut r = rng::indexed(cfg.seed, rng::STREAM_SYNTH, i as u64);
        let identity = i % cfg.n_identities;
        let split = if unheard.contains(&identity) {
            Split::UnheardVal
        } else if r.random::<f64>() < cfg.heard_val_fraction {
            Split::HeardVal
        } else {
            Split::Train
        };
        let emotion = sample_emotion(&cfg.emotion_weights, &mut r);
        let wave = synth_utterance(cfg, &voices[identity], emotion, &mut r);
        let track = synthetic_teacher(&cfg.teacher, &wave, &mut r)?;
        let track_id = format!("t{i:05}");
        let audio_rel = PathBuf::from("audio").join(format!("{track_id}.wav"));
        let logits_rel = PathBuf::from("logits").join(format!("{track_id}.evxl"));
        audio::write_wav(&out_dir.join(&audio_rel), &wave)?;
        write_logits_file(&out_dir.join(&logits_rel), &track.frames)?;
        records.push(TrackRecord {
            track_id,
            identity_id: format!("id{identity:03}"),
            split,
            audio_path: audio_rel,
            logits_path: logits_rel,
            num_frames: track.frames.len() as u32,
        });
    }
    // Guarantee non-empty heard_val and train splits.
    let counts = |rs: &[TrackRecord], s: Split| rs.iter().filter(|r| r.split == s).count();
    if counts(&records, Split::HeardVal) == 0 {
        if let Some(r) = records.iter_mut().rev().find(|r| r.split == Split::Train) {
            r.split = Split::HeardVal;
        }
    }
    if counts(&records, Split::Train) == 0 {
        if let Some(r) = records.iter_mut().find(|r| r.split == Split::HeardVal) {
            r.split = Split::Train;
        }
    }
    let manifest = Manifest::new(records, out_dir)?;
    if manifest.split_counts().contains(&0) {
        return Err(Error::InvalidArgument("generated manifest has an empty split".into()));
    }
    manifest.write(&out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregation::dominant_emotion;

    fn record(id: &str, identity: &str, split: Split) -> TrackRecord {
        TrackRecord {
            track_id: id.into(),
            identity_id: identity.into(),
            split,
            audio_path: format!("audio/{id}.wav").into(),
            logits_path: format!("logits/{id}.evxl").into(),
            num_frames: 3,
        }
    }

    fn tone(freq: f64, seconds: f64) -> Waveform {
        let n = (seconds * f64::from(SAMPLE_RATE)) as usize;
        Waveform {
            samples: (0..n)
                .map(|i| (0.5 * (std::f64::consts::TAU * freq * i as f64 / f64::from(SAMPLE_RATE)).sin()) as f32)
                .collect(),
            sample_rate: SAMPLE_RATE,
        }
    }

    #[test]
    fn manifest_validation() {
        let ok = vec![
            record("a", "p1", Split::Train),
            record("b", "p1", Split::HeardVal),
            record("c", "p2", Split::UnheardVal),
        ];
        assert!(Manifest::new(ok.clone(), ".").is_ok());

        let mut dup = ok.clone();
        dup[1].track_id = "a".into();
        assert!(matches!(Manifest::new(dup, "."), Err(Error::DuplicateTrack(_))));

        let mut leak = ok.clone();
        leak[2].identity_id = "p1".into();
        assert!(matches!(Manifest::new(leak, "."), Err(Error::IdentityLeakage { .. })));

        let mut zero = ok;
        zero[0].num_frames = 0;
        assert!(Manifest::new(zero, ".").is_err());
        assert!(Manifest::new(vec![], ".").is_err());
    }

    #[test]
    fn manifest_file_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        std::fs::write(&p, "").unwrap();
        assert!(matches!(load_manifest(&p), Err(Error::Empty(_))));
        std::fs::write(&p, "{\"track_id\": 1}\n").unwrap();
        assert!(matches!(load_manifest(&p), Err(Error::Manifest { line: 1, .. })));
        let m = Manifest::new(vec![record("a", "p", Split::Train)], dir.path()).unwrap();
        m.write(&p).unwrap();
        let back = load_manifest(&p).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_jsonl().unwrap(), std::fs::read_to_string(&p).unwrap());
    }

    #[test]
    fn logits_file_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.evxl");
        let frames: Vec<_> = (0..10).map(|i| EmotionLogits([i as f64 * 0.25; 8])).collect();
        write_logits_file(&p, &frames).unwrap();
        assert_eq!(read_logits_file(&p).unwrap(), frames);
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(bytes.len(), 16 + 10 * 8 * 4);
        std::fs::write(&p, &bytes[..bytes.len() - 4]).unwrap();
        assert!(read_logits_file(&p).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        std::fs::write(&p, &bad).unwrap();
        assert!(read_logits_file(&p).is_err());
        let mut nan = bytes;
        nan[16..20].copy_from_slice(&f32::NAN.to_le_bytes());
        std::fs::write(&p, &nan).unwrap();
        assert!(read_logits_file(&p).is_err());
    }

    #[test]
    fn teacher_follows_band_energy() {
        let spec = SyntheticTeacherSpec {
            noise_level: 0.0,
            ..Default::default()
        };
        let w = tone(spec.center(3), 2.0);
        let t = synthetic_teacher(&spec, &w, &mut rng::substream(0, "t")).unwrap();
        assert_eq!(t.frames.len(), 8);
        assert!(t.frames.iter().all(|f| dominant_emotion(f) == 3));

        let silence = Waveform {
            samples: vec![0.0; 16_000],
            sample_rate: SAMPLE_RATE,
        };
        let t = synthetic_teacher(&spec, &silence, &mut rng::substream(0, "t")).unwrap();
        assert!(t.frames.iter().all(|f| f.0 == [0.0; 8]));

        let short = tone(500.0, 0.2);
        assert!(synthetic_teacher(&spec, &short, &mut rng::substream(0, "t")).is_err());
    }

    #[test]
    fn teacher_is_deterministic_with_noise() {
        let spec = SyntheticTeacherSpec::default();
        let w = tone(1000.0, 1.5);
        let a = synthetic_teacher(&spec, &w, &mut rng::substream(4, "t")).unwrap();
        let b = synthetic_teacher(&spec, &w, &mut rng::substream(4, "t")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn teacher_shift_covariance() {
        let spec = SyntheticTeacherSpec {
            noise_level: 0.0,
            ..Default::default()
        };
        let mut r = rng::substream(1, "w");
        let w = Waveform {
            samples: (0..32_000).map(|_| r.random_range(-0.5f32..0.5)).collect(),
            sample_rate: SAMPLE_RATE,
        };
        let mut shifted = vec![0.0f32; 3840];
        shifted.extend_from_slice(&w.samples);
        let shifted = Waveform {
            samples: shifted,
            sample_rate: SAMPLE_RATE,
        };
        let a = synthetic_teacher(&spec, &w, &mut r).unwrap();
        let b = synthetic_teacher(&spec, &shifted, &mut r).unwrap();
        assert_eq!(b.frames.len(), a.frames.len() + 1);
        for k in 0..a.frames.len() {
            for i in 0..8 {
                assert!((a.frames[k].0[i] - b.frames[k + 1].0[i]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn invalid_teacher_bands() {
        let mut spec = SyntheticTeacherSpec::default();
        spec.bands[1] = (350.0, 650.0);
        assert!(spec.validate(SAMPLE_RATE).is_err());
        let mut spec = SyntheticTeacherSpec::default();
        spec.bands[7] = (3000.0, 9000.0);
        assert!(spec.validate(SAMPLE_RATE).is_err());
    }

    #[test]
    fn generation_needs_identities() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SyntheticDatasetConfig {
            n_identities: 2,
            ..Default::default()
        };
        assert!(generate_synthetic_dataset(&cfg, dir.path()).is_err());
    }
}
