//! Evaluation: ROC AUC, confusion matrices, k-fold splits and the affine
//! probe over 8-dimensional emotion embeddings.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::distill::NUM_EMOTIONS;
use crate::rng;
use crate::{Error, Result};

/// Area under the ROC curve: the probability that a random positive scores
/// above a random negative, ties counting one half.
pub fn roc_auc(scores: &[f64], positives: &[bool]) -> Result<f64> {
    if scores.len() != positives.len() {
        return Err(Error::Shape(format!(
            "{} scores vs {} labels",
            scores.len(),
            positives.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("NaN score".into()));
    }
    let n_pos = positives.iter().filter(|&&p| p).count();
    let n_neg = positives.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InvalidArgument(
            "ROC AUC needs at least one positive and one negative".into(),
        ));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of mid-ranks (1-based) of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        let pos_in_group = idx[i..=j].iter().filter(|&&k| positives[k]).count();
        rank_sum += mid * pos_in_group as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Row-normalized confusion matrix; rows are ground truth, columns
/// predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
    pub normalized: Vec<Vec<f64>>,
    /// Classes with no ground-truth items; their rows are all zero.
    pub empty_rows: Vec<usize>,
}

impl ConfusionMatrix {
    pub fn to_csv(&self, names: &[&str]) -> String {
        let k = self.normalized.len();
        let label = |i: usize| names.get(i).map_or_else(|| i.to_string(), |s| s.to_string());
        let mut s = String::from("truth");
        for j in 0..k {
            let _ = write!(s, ",{}", label(j));
        }
        s.push('\n');
        for (i, row) in self.normalized.iter().enumerate() {
            s.push_str(&label(i));
            for v in row {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }
}

pub fn confusion_matrix(predictions: &[usize], labels: &[usize], k: usize) -> Result<ConfusionMatrix> {
    if predictions.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions vs {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if let Some(bad) = predictions.iter().chain(labels).find(|&&v| v >= k) {
        return Err(Error::InvalidArgument(format!("class {bad} outside 0..{k}")));
    }
    let mut counts = vec![vec![0u64; k]; k];
    for (&p, &l) in predictions.iter().zip(labels) {
        counts[l][p] += 1;
    }
    let mut empty_rows = Vec::new();
    let normalized = counts
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let total: u64 = row.iter().sum();
            if total == 0 {
                empty_rows.push(i);
                vec![0.0; k]
            } else {
                row.iter().map(|&c| c as f64 / total as f64).collect()
            }
        })
        .collect();
    Ok(ConfusionMatrix {
        counts,
        normalized,
        empty_rows,
    })
}

/// Shuffles `0..n` and cuts it into `k` contiguous folds; the first `n % k`
/// folds get one extra item.
pub fn kfold_split<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Result<Vec<Vec<usize>>> {
    if k == 0 || n < k {
        return Err(Error::InvalidArgument(format!("cannot split {n} items into {k} folds")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = base + usize::from(f < extra);
        folds.push(idx[start..start + len].to_vec());
        start += len;
    }
    Ok(folds)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeParams {
    pub iterations: usize,
    pub learning_rate: f64,
}

impl Default for ProbeParams {
    fn default() -> Self {
        Self {
            iterations: 2000,
            learning_rate: 0.1,
        }
    }
}

/// `softmax(weight * x + bias)` over `K` target classes.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineProbe {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl AffineProbe {
    pub fn num_classes(&self) -> usize {
        self.bias.len()
    }

    pub fn logits(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight.t()) + &self.bias
    }

    pub fn predict_proba(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut z = self.logits(x);
        softmax_rows(&mut z);
        z
    }

    pub fn predict(&self, x: &Array2<f64>) -> Vec<usize> {
        self.logits(x)
            .axis_iter(Axis(0))
            .map(|row| argmax(row.as_slice().unwrap()))
            .collect()
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

fn softmax_rows(z: &mut Array2<f64>) {
    for mut row in z.axis_iter_mut(Axis(0)) {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
}

/// Fitted probe plus the training loss before each iteration and after the
/// last one.
#[derive(Debug, Clone)]
pub struct ProbeFit {
    pub probe: AffineProbe,
    pub losses: Vec<f64>,
}

fn check_embeddings(x: &Array2<f64>, labels: &[usize], k: usize) -> Result<()> {
    if x.nrows() != labels.len() {
        return Err(Error::Shape(format!("{} embeddings vs {} labels", x.nrows(), labels.len())));
    }
    if k < 2 {
        return Err(Error::InvalidArgument("a probe needs at least two classes".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("embedding".into()));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::InvalidArgument(format!("label {bad} outside 0..{k}")));
    }
    Ok(())
}

fn fit_inner(x: &Array2<f64>, labels: &[usize], k: usize, params: &ProbeParams, seed: u64) -> Result<ProbeFit> {
    let (n, d) = x.dim();
    if n == 0 {
        return Err(Error::Empty("no embeddings to fit".into()));
    }
    // Gradient descent runs on standardized features; the result is folded
    // back into an affine map on the raw embeddings.
    let mean = x.mean_axis(Axis(0)).unwrap();
    let std = x.var_axis(Axis(0), 0.0).mapv(|v| if v > 1e-24 { v.sqrt() } else { 1.0 });
    let z = (x - &mean) / &std;
    if z.iter().all(|v| v.abs() < 1e-12) {
        return Err(Error::InvalidArgument("degenerate embeddings: all rows identical".into()));
    }
    let mut onehot = Array2::<f64>::zeros((n, k));
    for (i, &l) in labels.iter().enumerate() {
        onehot[[i, l]] = 1.0;
    }
    let mut r = rng::substream(seed, rng::STREAM_PROBE);
    let init = Normal::new(0.0, 0.01).unwrap();
    let mut w = Array2::from_shape_simple_fn((k, d), || init.sample(&mut r));
    let mut b = Array1::<f64>::zeros(k);
    let lr = params.learning_rate;
    let mut losses = Vec::with_capacity(params.iterations + 1);
    let loss_of = |p: &Array2<f64>| -> f64 {
        -(p * &onehot).sum_axis(Axis(1)).mapv(|v| v.max(1e-300).ln()).sum() / n as f64
    };
    for _ in 0..params.iterations {
        let mut p = z.dot(&w.t()) + &b;
        softmax_rows(&mut p);
        losses.push(loss_of(&p));
        let diff = (&p - &onehot) / n as f64;
        let gw = diff.t().dot(&z);
        let gb = diff.sum_axis(Axis(0));
        w.scaled_add(-lr, &gw);
        b.scaled_add(-lr, &gb);
    }
    let mut p = z.dot(&w.t()) + &b;
    softmax_rows(&mut p);
    losses.push(loss_of(&p));
    let weight = &w / &std;
    let bias = &b - &weight.dot(&mean);
    Ok(ProbeFit {
        probe: AffineProbe { weight, bias },
        losses,
    })
}

/// Fits an affine map plus softmax by full-batch gradient descent on the
/// cross entropy. Every class must be present.
pub fn fit_affine_probe(
    embeddings: &Array2<f64>,
    labels: &[usize],
    k: usize,
    params: &ProbeParams,
    seed: u64,
) -> Result<ProbeFit> {
    check_embeddings(embeddings, labels, k)?;
    if embeddings.nrows() < k {
        return Err(Error::InvalidArgument(format!(
            "{} embeddings cannot cover {k} classes",
            embeddings.nrows()
        )));
    }
    let mut present = vec![false; k];
    labels.iter().for_each(|&l| present[l] = true);
    if let Some(missing) = present.iter().position(|p| !p) {
        return Err(Error::InvalidArgument(format!("class {missing} has no training items")));
    }
    fit_inner(embeddings, labels, k, params, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub num_items: usize,
    pub num_classes: usize,
    pub folds: usize,
    pub accuracy: f64,
    pub accuracy_std: f64,
    pub fold_accuracies: Vec<f64>,
    /// Mean over folds of one-vs-rest AUC of the probe logits; `None` when no fold had both
    /// positives and negatives for the class.
    pub per_class_auc: Vec<Option<f64>>,
    pub mean_auc: f64,
    pub confusion: ConfusionMatrix,
}

/// k-fold cross validation of the affine probe: fit on k-1 folds, score
/// the held-out fold, and aggregate.
pub fn evaluate_probe_cv(
    embeddings: &Array2<f64>,
    labels: &[usize],
    k: usize,
    folds: usize,
    params: &ProbeParams,
    seed: u64,
) -> Result<EvalReport> {
    check_embeddings(embeddings, labels, k)?;
    let n = labels.len();
    let split = kfold_split(n, folds, &mut rng::substream(seed, rng::STREAM_FOLDS))?;
    let mut fold_acc = Vec::with_capacity(folds);
    let mut auc_sum = vec![0.0; k];
    let mut auc_count = vec![0usize; k];
    let mut all_pred = vec![0usize; n];
    for (f, test) in split.iter().enumerate() {
        let train: Vec<usize> = split
            .iter()
            .enumerate()
            .filter(|(g, _)| *g != f)
            .flat_map(|(_, idx)| idx.iter().copied())
            .collect();
        let xt = embeddings.select(Axis(0), &train);
        let yt: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
        let fit = fit_inner(&xt, &yt, k, params, seed.wrapping_add(f as u64))?;
        let xv = embeddings.select(Axis(0), test);
        let yv: Vec<usize> = test.iter().map(|&i| labels[i]).collect();
        let scores = fit.probe.logits(&xv);
        let pred = fit.probe.predict(&xv);
        let correct = pred.iter().zip(&yv).filter(|(a, b)| a == b).count();
        fold_acc.push(correct as f64 / test.len() as f64);
        for (&i, &p) in test.iter().zip(&pred) {
            all_pred[i] = p;
        }
        for c in 0..k {
            let pos: Vec<bool> = yv.iter().map(|&y| y == c).collect();
            if let Ok(a) = roc_auc(&scores.column(c).to_vec(), &pos) {
                auc_sum[c] += a;
                auc_count[c] += 1;
            }
        }
    }
    let per_class_auc: Vec<Option<f64>> = (0..k)
        .map(|c| (auc_count[c] > 0).then(|| auc_sum[c] / auc_count[c] as f64))
        .collect();
    let defined: Vec<f64> = per_class_auc.iter().flatten().copied().collect();
    let mean_auc = if defined.is_empty() {
        f64::NAN
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    };
    let accuracy = fold_acc.iter().sum::<f64>() / folds as f64;
    let accuracy_std = if folds > 1 {
        (fold_acc.iter().map(|a| (a - accuracy).powi(2)).sum::<f64>() / (folds - 1) as f64).sqrt()
    } else {
        0.0
    };
    Ok(EvalReport {
        num_items: n,
        num_classes: k,
        folds,
        accuracy,
        accuracy_std,
        fold_accuracies: fold_acc,
        per_class_auc,
        mean_auc,
        confusion: confusion_matrix(&all_pred, labels, k)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanAuc {
    pub mean: f64,
    /// `None` for emotions without both positives and negatives.
    pub per_emotion: Vec<Option<f64>>,
}

/// One-vs-rest AUC of each emotion's score against the dominant teacher
/// label, averaged over emotions that occur as a label at least once.
pub fn mean_auc_over_present_emotions(embeddings: &[[f64; NUM_EMOTIONS]], labels: &[usize]) -> Result<MeanAuc> {
    if embeddings.len() != labels.len() {
        return Err(Error::Shape(format!("{} embeddings vs {} labels", embeddings.len(), labels.len())));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= NUM_EMOTIONS) {
        return Err(Error::InvalidArgument(format!("label {bad} is not an emotion index")));
    }
    let mut present = [false; NUM_EMOTIONS];
    labels.iter().for_each(|&l| present[l] = true);
    if present.iter().filter(|&&p| p).count() < 2 {
        return Err(Error::InvalidArgument("fewer than two emotions present".into()));
    }
    let per_emotion: Vec<Option<f64>> = (0..NUM_EMOTIONS)
        .map(|e| {
            if !present[e] {
                return Ok(None);
            }
            let scores: Vec<f64> = embeddings.iter().map(|x| x[e]).collect();
            let pos: Vec<bool> = labels.iter().map(|&l| l == e).collect();
            roc_auc(&scores, &pos).map(Some)
        })
        .collect::<Result<_>>()?;
    let vals: Vec<f64> = per_emotion.iter().flatten().copied().collect();
    Ok(MeanAuc {
        mean: vals.iter().sum::<f64>() / vals.len() as f64,
        per_emotion,
    })
}

/// One line of the per-track score dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub track_id: String,
    pub scores: [f64; NUM_EMOTIONS],
}

/// One line of a track label file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub track_id: String,
    pub label: usize,
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut s = String::new();
    for it in items {
        s.push_str(&serde_json::to_string(it)?);
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Reads JSON lines, ignoring unknown fields and blank lines.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Manifest {
            line: i + 1,
            message: format!("{}: {e}", path.display()),
        })?);
    }
    Ok(out)
}
