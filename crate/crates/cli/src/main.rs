use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use emoxfer_core::aggregation::{dominant_emotion, emotion_histogram};
use emoxfer_core::audio::{SpectrogramExtractor, SAMPLE_RATE};
use emoxfer_core::checkpoint::Checkpoint;
use emoxfer_core::eval::{self, LabelRecord, ProbeParams, ScoreRecord};
use emoxfer_core::teacher::{self, SyntheticDatasetConfig};
use emoxfer_core::trainer::{self, LossKind, TrainConfig};
use emoxfer_core::{Emotion, Manifest, Pooling, Split, StudentConfig, SyntheticTeacherSpec, NUM_EMOTIONS};

const CONFIG_ECHO: &str = "config.json";

#[derive(Debug, Parser)]
#[command(name = "emoxfer", version, about = "Cross-modal emotion distillation from face to speech")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Compute magnitude spectrograms and write them as EVXS caches.
    Extract(ExtractArgs),
    /// Generate a synthetic tone-mixture dataset with a band-energy teacher.
    Synth(SynthArgs),
    /// Pool frame logits into track labels and an emotion histogram.
    Annotate(AnnotateArgs),
    /// Train a student network on teacher logits.
    Distill(DistillArgs),
    /// Fit and cross-validate an affine probe on 8-dim embeddings.
    Probe(ProbeArgs),
    /// Score validation splits against dominant teacher labels.
    Report(ReportArgs),
    /// Re-run the command recorded in a config echo.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
struct ExtractArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Restrict to one split (train, heard_val, unheard_val).
    #[arg(long)]
    split: Option<Split>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 100)]
    tracks: usize,
    #[arg(long, default_value_t = 10)]
    identities: usize,
    /// Standard deviation of the teacher's per-frame logit noise.
    #[arg(long, default_value_t = 0.1)]
    noise_level: f64,
    #[arg(long, default_value_t = 2.0)]
    min_duration: f64,
    #[arg(long, default_value_t = 8.0)]
    max_duration: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct AnnotateArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value = "max")]
    agg: Pooling,
    #[arg(long)]
    split: Option<Split>,
}

#[derive(Debug, Args)]
struct DistillArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 2.0)]
    temperature: f64,
    #[arg(long, default_value_t = 1e-4)]
    lr_start: f64,
    #[arg(long, default_value_t = 1e-5)]
    lr_end: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 5e-4)]
    weight_decay: f64,
    #[arg(long, default_value_t = 4.0)]
    segment_seconds: f64,
    #[arg(long, default_value_t = 1.0)]
    width_multiplier: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long, default_value = "distill")]
    loss: LossKind,
    #[arg(long, default_value = "max")]
    agg: Pooling,
}

#[derive(Debug, Args)]
struct ProbeArgs {
    /// Track labels (JSON lines with `track_id` and `label`).
    #[arg(long)]
    labels: PathBuf,
    /// Precomputed embeddings (JSON lines with `track_id` and `scores`).
    #[arg(long, conflicts_with_all = ["model", "manifest"])]
    scores: Option<PathBuf>,
    /// Student checkpoint used to embed the manifest's tracks.
    #[arg(long, requires = "manifest")]
    model: Option<PathBuf>,
    #[arg(long, requires = "model")]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 10)]
    folds: usize,
    /// Number of target classes; defaults to the largest label plus one.
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long, default_value_t = 2000)]
    iterations: usize,
    #[arg(long, default_value_t = 0.1)]
    step: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Debug, Args)]
struct ReportArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value = "max")]
    agg: Pooling,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Debug, Args)]
struct ReplayArgs {
    /// A `config.json` written by an earlier run.
    config: PathBuf,
    /// Write outputs here instead of the recorded directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

/// Written beside every run's outputs.
#[derive(Debug, Serialize, Deserialize)]
struct ConfigEcho {
    version: String,
    cwd: PathBuf,
    argv: Vec<String>,
    #[serde(default)]
    settings: serde_json::Value,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("EMOXFER_LOG", "info")).init();
    let argv: Vec<String> = std::env::args().collect();
    match run(argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(argv: Vec<String>) -> Result<()> {
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let args = argv[1..].to_vec();
    match cli.command {
        Command::Extract(a) => extract(&a, &args),
        Command::Synth(a) => synth(&a, &args),
        Command::Annotate(a) => annotate(&a, &args),
        Command::Distill(a) => distill(&a, &args),
        Command::Probe(a) => probe(&a, &args),
        Command::Report(a) => report(&a, &args),
        Command::Replay(a) => replay(&a, &argv[0]),
    }
}

fn prepare_out_dir(dir: &Path, argv: &[String], settings: serde_json::Value) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let echo = ConfigEcho {
        version: env!("CARGO_PKG_VERSION").to_string(),
        cwd: std::env::current_dir()?,
        argv: argv.to_vec(),
        settings,
    };
    write_file(&dir.join(CONFIG_ECHO), serde_json::to_string_pretty(&echo)? + "\n")
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn replay(a: &ReplayArgs, program: &str) -> Result<()> {
    let text = std::fs::read_to_string(&a.config).with_context(|| format!("reading {}", a.config.display()))?;
    let echo: ConfigEcho = serde_json::from_str(&text).with_context(|| format!("parsing {}", a.config.display()))?;
    if echo.argv.first().is_some_and(|c| c == "replay") {
        bail!("config echo records a replay; point at the original run's echo");
    }
    let mut argv = vec![program.to_string()];
    let mut recorded = echo.argv.iter();
    while let Some(arg) = recorded.next() {
        if a.out_dir.is_some() && arg == "--out-dir" {
            recorded.next();
        } else if !(a.out_dir.is_some() && arg.starts_with("--out-dir=")) {
            argv.push(arg.clone());
        }
    }
    if let Some(dir) = &a.out_dir {
        let abs = std::path::absolute(dir)?;
        argv.push("--out-dir".into());
        argv.push(abs.to_string_lossy().into_owned());
    }
    std::env::set_current_dir(&echo.cwd).with_context(|| format!("entering {}", echo.cwd.display()))?;
    info!("replaying {:?}", &argv[1..]);
    run(argv)
}

fn selected<'a>(m: &'a Manifest, split: Option<Split>) -> Vec<&'a emoxfer_core::TrackRecord> {
    m.records.iter().filter(|r| split.is_none_or(|s| r.split == s)).collect()
}

fn extract(a: &ExtractArgs, argv: &[String]) -> Result<()> {
    let manifest = teacher::load_manifest(&a.manifest)?;
    prepare_out_dir(&a.out_dir, argv, serde_json::json!({ "split": a.split }))?;
    let extractor = SpectrogramExtractor::new(SAMPLE_RATE)?;
    let recs = selected(&manifest, a.split);
    for r in &recs {
        let spec = extractor.compute(&manifest.load_audio(r)?)?;
        spec.write_cache(&a.out_dir.join(format!("{}.evxs", r.track_id)))?;
    }
    info!("wrote {} spectrograms to {}", recs.len(), a.out_dir.display());
    Ok(())
}

fn synth(a: &SynthArgs, argv: &[String]) -> Result<()> {
    let cfg = SyntheticDatasetConfig {
        n_tracks: a.tracks,
        n_identities: a.identities,
        teacher: SyntheticTeacherSpec {
            noise_level: a.noise_level,
            ..Default::default()
        },
        min_duration_s: a.min_duration,
        max_duration_s: a.max_duration,
        seed: a.seed,
        ..Default::default()
    };
    prepare_out_dir(&a.out_dir, argv, serde_json::to_value(&cfg)?)?;
    let m = teacher::generate_synthetic_dataset(&cfg, &a.out_dir)?;
    let [train, heard, unheard] = m.split_counts();
    info!("generated {} tracks: {train} train, {heard} heard_val, {unheard} unheard_val", m.records.len());
    Ok(())
}

#[derive(Serialize)]
struct TrackLabel<'a> {
    track_id: &'a str,
    split: Split,
    label: usize,
    emotion: &'static str,
    logits: [f64; NUM_EMOTIONS],
}

fn annotate(a: &AnnotateArgs, argv: &[String]) -> Result<()> {
    let manifest = teacher::load_manifest(&a.manifest)?;
    prepare_out_dir(&a.out_dir, argv, serde_json::json!({ "agg": a.agg, "split": a.split }))?;
    let recs = selected(&manifest, a.split);
    if recs.is_empty() {
        bail!("no tracks selected");
    }
    let mut pooled = Vec::with_capacity(recs.len());
    let mut lines = String::new();
    for r in &recs {
        let track = manifest.load_frame_logits(r)?;
        let p = a.agg.pool(&track.frames)?;
        let label = dominant_emotion(&p);
        lines.push_str(&serde_json::to_string(&TrackLabel {
            track_id: &r.track_id,
            split: r.split,
            label,
            emotion: Emotion::ALL[label].name(),
            logits: p.0,
        })?);
        lines.push('\n');
        pooled.push(p);
    }
    write_file(&a.out_dir.join("track_labels.jsonl"), lines)?;
    let hist = emotion_histogram(&pooled)?;
    let total = hist.total() as f64;
    let proportions: serde_json::Map<String, serde_json::Value> = Emotion::ALL
        .iter()
        .map(|e| (e.name().to_string(), (hist.0[e.index()] as f64 / total).into()))
        .collect();
    let json = serde_json::json!({
        "total": hist.total(),
        "counts": hist.to_json(),
        "proportions": proportions,
    });
    write_file(&a.out_dir.join("histogram.json"), serde_json::to_string_pretty(&json)? + "\n")?;
    let mut csv = String::from("emotion,count,proportion\n");
    for e in Emotion::ALL {
        let c = hist.0[e.index()];
        csv.push_str(&format!("{},{},{}\n", e.name(), c, c as f64 / total));
    }
    write_file(&a.out_dir.join("histogram.csv"), csv)?;
    info!("annotated {} tracks", recs.len());
    Ok(())
}

fn distill(a: &DistillArgs, argv: &[String]) -> Result<()> {
    let cfg = TrainConfig {
        epochs: a.epochs,
        momentum: a.momentum,
        weight_decay: a.weight_decay,
        lr_start: a.lr_start,
        lr_end: a.lr_end,
        temperature: a.temperature,
        segment_s: a.segment_seconds,
        batch_size: a.batch_size,
        seed: a.seed,
        loss: a.loss,
        pooling: a.agg,
        workers: a.workers,
    };
    cfg.validate()?;
    let student = StudentConfig::standard().with_width_multiplier(a.width_multiplier);
    student.validate()?;
    let manifest = teacher::load_manifest(&a.manifest)?;
    prepare_out_dir(
        &a.out_dir,
        argv,
        serde_json::json!({ "train": &cfg, "student": &student }),
    )?;
    let out = trainer::train(&manifest, &cfg, &student)?;
    write_file(&a.out_dir.join("history.csv"), out.history.to_csv())?;
    Checkpoint {
        params: out.params,
        norm: Some(out.norm),
    }
    .write(&a.out_dir.join("model.evxm"))?;
    info!("best epoch {} written to {}", out.best_epoch, a.out_dir.join("model.evxm").display());
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<(Checkpoint, emoxfer_core::NormalizationStats)> {
    let ck = Checkpoint::read(path)?;
    let norm = ck
        .norm
        .clone()
        .with_context(|| format!("{} has no normalization statistics", path.display()))?;
    if ck.params.config().output_dim() != NUM_EMOTIONS {
        bail!("{} does not produce {NUM_EMOTIONS} emotion logits", path.display());
    }
    Ok((ck, norm))
}

fn embed(model: &Path, manifest: &Manifest, recs: &[&emoxfer_core::TrackRecord], workers: usize) -> Result<Vec<ScoreRecord>> {
    let (ck, norm) = load_checkpoint(model)?;
    let logits = trainer::predict_tracks(&ck.params, &norm, manifest, recs, workers)?;
    Ok(recs
        .iter()
        .zip(logits)
        .map(|(r, l)| ScoreRecord {
            track_id: r.track_id.clone(),
            scores: l.0,
        })
        .collect())
}

fn probe(a: &ProbeArgs, argv: &[String]) -> Result<()> {
    let labels: Vec<LabelRecord> = eval::read_jsonl(&a.labels)?;
    if labels.is_empty() {
        bail!("{} has no labels", a.labels.display());
    }
    prepare_out_dir(
        &a.out_dir,
        argv,
        serde_json::json!({ "folds": a.folds, "iterations": a.iterations, "step": a.step, "seed": a.seed }),
    )?;
    let scores: Vec<ScoreRecord> = match (&a.scores, &a.model, &a.manifest) {
        (Some(p), _, _) => eval::read_jsonl(p)?,
        (None, Some(model), Some(m)) => {
            let manifest = teacher::load_manifest(m)?;
            let wanted: std::collections::HashSet<&str> = labels.iter().map(|l| l.track_id.as_str()).collect();
            let recs: Vec<_> = manifest.records.iter().filter(|r| wanted.contains(r.track_id.as_str())).collect();
            let s = embed(model, &manifest, &recs, a.workers)?;
            eval::write_jsonl(&a.out_dir.join("scores.jsonl"), &s)?;
            s
        }
        _ => bail!("probe needs either --scores or --model with --manifest"),
    };
    let by_id: std::collections::HashMap<&str, &ScoreRecord> = scores.iter().map(|s| (s.track_id.as_str(), s)).collect();
    let mut x = Array2::<f64>::zeros((labels.len(), NUM_EMOTIONS));
    for (i, l) in labels.iter().enumerate() {
        let s = by_id
            .get(l.track_id.as_str())
            .with_context(|| format!("no embedding for track {}", l.track_id))?;
        x.row_mut(i).assign(&ArrayView1::from(&s.scores));
    }
    let y: Vec<usize> = labels.iter().map(|l| l.label).collect();
    let k = a.classes.unwrap_or_else(|| y.iter().max().map_or(0, |m| m + 1));
    let params = ProbeParams {
        iterations: a.iterations,
        learning_rate: a.step,
    };
    let rep = eval::evaluate_probe_cv(&x, &y, k, a.folds, &params, a.seed)?;
    write_file(&a.out_dir.join("report.json"), serde_json::to_string_pretty(&rep)? + "\n")?;
    let names: Vec<String> = (0..k).map(|c| c.to_string()).collect();
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    write_file(&a.out_dir.join("confusion.csv"), rep.confusion.to_csv(&names))?;
    info!(
        "probe accuracy {:.4} ± {:.4}, mean AUC {:.4}",
        rep.accuracy, rep.accuracy_std, rep.mean_auc
    );
    Ok(())
}

#[derive(Serialize)]
struct SplitReport {
    tracks: usize,
    mean_auc: eval::MeanAuc,
    /// Fraction of tracks whose student argmax matches the teacher's.
    agreement: f64,
    confusion: eval::ConfusionMatrix,
}

fn report(a: &ReportArgs, argv: &[String]) -> Result<()> {
    let manifest = teacher::load_manifest(&a.manifest)?;
    prepare_out_dir(&a.out_dir, argv, serde_json::json!({ "agg": a.agg }))?;
    let names: Vec<&str> = Emotion::ALL.iter().map(|e| e.name()).collect();
    let mut all_scores = Vec::new();
    let mut splits = serde_json::Map::new();
    for split in [Split::HeardVal, Split::UnheardVal] {
        let recs = manifest.split(split);
        if recs.is_empty() {
            continue;
        }
        let scores = embed(&a.model, &manifest, &recs, a.workers)?;
        let labels = recs
            .iter()
            .map(|r| Ok(dominant_emotion(&a.agg.pool(&manifest.load_frame_logits(r)?.frames)?)))
            .collect::<Result<Vec<usize>>>()?;
        let emb: Vec<[f64; NUM_EMOTIONS]> = scores.iter().map(|s| s.scores).collect();
        let preds: Vec<usize> = emb
            .iter()
            .map(|e| dominant_emotion(&emoxfer_core::EmotionLogits(*e)))
            .collect();
        let agree = preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
        let confusion = eval::confusion_matrix(&preds, &labels, NUM_EMOTIONS)?;
        write_file(&a.out_dir.join(format!("confusion_{}.csv", split.name())), confusion.to_csv(&names))?;
        let sr = SplitReport {
            tracks: recs.len(),
            mean_auc: eval::mean_auc_over_present_emotions(&emb, &labels)?,
            agreement: agree as f64 / recs.len() as f64,
            confusion,
        };
        info!("{}: mean AUC {:.4} over {} tracks", split.name(), sr.mean_auc.mean, sr.tracks);
        splits.insert(split.name().to_string(), serde_json::to_value(&sr)?);
        all_scores.extend(scores);
    }
    if splits.is_empty() {
        bail!("manifest has no validation tracks");
    }
    eval::write_jsonl(&a.out_dir.join("scores.jsonl"), &all_scores)?;
    write_file(
        &a.out_dir.join("report.json"),
        serde_json::to_string_pretty(&serde_json::Value::Object(splits))? + "\n",
    )?;
    Ok(())
}
