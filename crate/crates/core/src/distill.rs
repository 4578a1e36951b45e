//! Temperature softmax and the teacher/student losses.
//!
//! All arithmetic here is in `f64`. The training loop converts network
//! outputs to [`EmotionLogits`] before calling into this module.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const NUM_EMOTIONS: usize = 8;

/// Lower bound applied to probabilities before taking a logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// The canonical emotion order shared by every file format and report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Emotion {
    Neutral,
    Happiness,
    Surprise,
    Sadness,
    Anger,
    Disgust,
    Fear,
    Contempt,
}

impl Emotion {
    pub const ALL: [Emotion; NUM_EMOTIONS] = [
        Emotion::Neutral,
        Emotion::Happiness,
        Emotion::Surprise,
        Emotion::Sadness,
        Emotion::Anger,
        Emotion::Disgust,
        Emotion::Fear,
        Emotion::Contempt,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Emotion> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Emotion::Neutral => "neutral",
            Emotion::Happiness => "happiness",
            Emotion::Surprise => "surprise",
            Emotion::Sadness => "sadness",
            Emotion::Anger => "anger",
            Emotion::Disgust => "disgust",
            Emotion::Fear => "fear",
            Emotion::Contempt => "contempt",
        }
    }
}

impl fmt::Display for Emotion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Eight pre-softmax scores in canonical emotion order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmotionLogits(pub [f64; NUM_EMOTIONS]);

impl EmotionLogits {
    pub fn new(values: [f64; NUM_EMOTIONS]) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("logits {values:?}")));
        }
        Ok(Self(values))
    }

    pub fn zeros() -> Self {
        Self([0.0; NUM_EMOTIONS])
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        let arr: [f64; NUM_EMOTIONS] = values.try_into().map_err(|_| {
            Error::Shape(format!(
                "expected {NUM_EMOTIONS} logits, got {}",
                values.len()
            ))
        })?;
        Self::new(arr)
    }

    pub fn values(&self) -> &[f64; NUM_EMOTIONS] {
        &self.0
    }

    pub fn shifted(&self, c: f64) -> Self {
        Self(self.0.map(|v| v + c))
    }
}

/// A probability vector over the eight emotions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmotionDistribution(pub [f64; NUM_EMOTIONS]);

impl EmotionDistribution {
    /// Validates non-negativity and unit sum (to 1e-9).
    pub fn new(probs: [f64; NUM_EMOTIONS]) -> Result<Self> {
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "probabilities must be finite and non-negative: {probs:?}"
            )));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "probabilities sum to {sum}, expected 1"
            )));
        }
        Ok(Self(probs))
    }

    pub fn uniform() -> Self {
        Self([1.0 / NUM_EMOTIONS as f64; NUM_EMOTIONS])
    }

    pub fn probs(&self) -> &[f64; NUM_EMOTIONS] {
        &self.0
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        self.0
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| -p * p.ln())
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Temperature(f64);

impl Temperature {
    pub fn new(t: f64) -> Result<Self> {
        if !(t.is_finite() && t > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "temperature must be positive, got {t}"
            )));
        }
        Ok(Self(t))
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl Default for Temperature {
    fn default() -> Self {
        Self(2.0)
    }
}

/// `p_i = exp(x_i / T) / sum_j exp(x_j / T)`, evaluated after subtracting the
/// maximum logit.
pub fn temperature_softmax(x: &EmotionLogits, t: Temperature) -> EmotionDistribution {
    EmotionDistribution(softmax_array(&x.0, t.get()))
}

fn softmax_array(x: &[f64; NUM_EMOTIONS], t: f64) -> [f64; NUM_EMOTIONS] {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = x.map(|v| ((v - max) / t).exp());
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

/// `-sum_i p_i ln q_i`, with `q` floored at [`PROB_FLOOR`].
pub fn cross_entropy(p: &EmotionDistribution, q: &EmotionDistribution) -> f64 {
    p.0.iter()
        .zip(q.0.iter())
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| -pi * qi.max(PROB_FLOOR).ln())
        .sum()
}

/// A scalar loss with its gradient with respect to the student logits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: [f64; NUM_EMOTIONS],
}

/// Cross entropy between the softened teacher and student distributions.
///
/// The gradient is `(softmax(s/T) - softmax(t/T)) / T`; the loss is not
/// rescaled by `T^2`.
pub fn distillation_loss(
    teacher: &EmotionLogits,
    student: &EmotionLogits,
    t: Temperature,
) -> LossGrad {
    let p = temperature_softmax(teacher, t);
    let q = temperature_softmax(student, t);
    let loss = cross_entropy(&p, &q);
    let mut grad = [0.0; NUM_EMOTIONS];
    for i in 0..NUM_EMOTIONS {
        grad[i] = (q.0[i] - p.0[i]) / t.get();
    }
    LossGrad { loss, grad }
}

/// `0.5 * |teacher - student|^2` on raw logits.
pub fn euclidean_logit_loss(teacher: &EmotionLogits, student: &EmotionLogits) -> LossGrad {
    let mut grad = [0.0; NUM_EMOTIONS];
    let mut loss = 0.0;
    for i in 0..NUM_EMOTIONS {
        let d = student.0[i] - teacher.0[i];
        grad[i] = d;
        loss += 0.5 * d * d;
    }
    LossGrad { loss, grad }
}

/// Mean of per-item losses over a batch; each gradient row is divided by the
/// batch size so it is the gradient of the mean.
pub fn batch_mean<F>(teachers: &[EmotionLogits], students: &[EmotionLogits], f: F) -> Result<(f64, Vec<[f64; NUM_EMOTIONS]>)>
where
    F: Fn(&EmotionLogits, &EmotionLogits) -> LossGrad,
{
    if teachers.len() != students.len() {
        return Err(Error::Shape(format!(
            "{} teacher rows vs {} student rows",
            teachers.len(),
            students.len()
        )));
    }
    if teachers.is_empty() {
        return Err(Error::Empty("loss batch".into()));
    }
    let n = teachers.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(teachers.len());
    for (t, s) in teachers.iter().zip(students) {
        let lg = f(t, s);
        total += lg.loss;
        grads.push(lg.grad.map(|g| g / n));
    }
    Ok((total / n, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn logits(v: [f64; 8]) -> EmotionLogits {
        EmotionLogits::new(v).unwrap()
    }

    fn t(v: f64) -> Temperature {
        Temperature::new(v).unwrap()
    }

    #[test]
    fn uniform_for_zero_logits() {
        let p = temperature_softmax(&EmotionLogits::zeros(), t(2.0));
        for v in p.0 {
            assert!((v - 0.125).abs() < 1e-15);
        }
    }

    #[test]
    fn single_hot_logit_at_unit_temperature() {
        // e / (e + 7), evaluated independently.
        let e = std::f64::consts::E;
        let expected = e / (e + 7.0);
        let p = temperature_softmax(&logits([1.0, 0., 0., 0., 0., 0., 0., 0.]), t(1.0));
        assert!((p.0[0] - expected).abs() < 1e-15);
        assert!((p.0[0] - 0.279_708_07).abs() < 1e-8);
    }

    #[test]
    fn high_temperature_is_near_uniform() {
        let p = temperature_softmax(&logits([10.0, 0., 0., 0., 0., 0., 0., 0.]), t(1000.0));
        for v in p.0 {
            assert!((v - 0.125).abs() < 1e-2);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(EmotionLogits::new([f64::NAN; 8]).is_err());
        assert!(Temperature::new(0.0).is_err());
        assert!(Temperature::new(-1.0).is_err());
        assert!(EmotionLogits::from_slice(&[1.0; 7]).is_err());
        assert!(EmotionDistribution::new([0.5; 8]).is_err());
    }

    #[test]
    fn cross_entropy_reference_values() {
        let ln8 = 8f64.ln();
        let u = EmotionDistribution::uniform();
        assert!((cross_entropy(&u, &u) - ln8).abs() < 1e-12);
        let one_hot = EmotionDistribution::new([1.0, 0., 0., 0., 0., 0., 0., 0.]).unwrap();
        assert!((cross_entropy(&one_hot, &u) - ln8).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_floors_zero_probabilities() {
        let p = EmotionDistribution::new([1.0, 0., 0., 0., 0., 0., 0., 0.]).unwrap();
        let q = EmotionDistribution::new([0.0, 1.0, 0., 0., 0., 0., 0., 0.]).unwrap();
        let ce = cross_entropy(&p, &q);
        assert!(ce.is_finite());
        assert!((ce - (-(PROB_FLOOR.ln()))).abs() < 1e-9);
    }

    #[test]
    fn distillation_minimum_at_teacher() {
        let x = logits([0.3, -1.0, 2.0, 0.0, 0.5, -0.2, 1.1, 0.9]);
        let lg = distillation_loss(&x, &x, t(2.0));
        let entropy = temperature_softmax(&x, t(2.0)).entropy();
        assert!((lg.loss - entropy).abs() < 1e-12);
        assert!(lg.grad.iter().all(|g| g.abs() <= 1e-12));
    }

    fn central_difference<F: Fn(&EmotionLogits) -> f64>(f: F, x: &EmotionLogits, h: f64) -> [f64; 8] {
        let mut out = [0.0; 8];
        for i in 0..8 {
            let mut plus = *x;
            let mut minus = *x;
            plus.0[i] += h;
            minus.0[i] -= h;
            out[i] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        out
    }

    #[test]
    fn distillation_gradient_matches_finite_differences() {
        let teacher = EmotionLogits::zeros();
        let student = logits([1.0, 0., 0., 0., 0., 0., 0., 0.]);
        let lg = distillation_loss(&teacher, &student, t(2.0));
        let fd = central_difference(|s| distillation_loss(&teacher, s, t(2.0)).loss, &student, 1e-5);
        for i in 0..8 {
            assert!((lg.grad[i] - fd[i]).abs() < 1e-6, "{i}: {} vs {}", lg.grad[i], fd[i]);
        }
    }

    #[test]
    fn euclidean_reference_and_gradient() {
        let teacher = logits([1.0, 0., 0., 0., 0., 0., 0., 0.]);
        let student = EmotionLogits::zeros();
        let lg = euclidean_logit_loss(&teacher, &student);
        assert_eq!(lg.loss, 0.5);
        assert_eq!(lg.grad, [-1.0, 0., 0., 0., 0., 0., 0., 0.]);
        assert_eq!(euclidean_logit_loss(&teacher, &teacher).loss, 0.0);

        let s = logits([0.2, -0.4, 1.3, 0.0, 2.2, -1.0, 0.7, 0.1]);
        let lg = euclidean_logit_loss(&teacher, &s);
        let fd = central_difference(|s| euclidean_logit_loss(&teacher, s).loss, &s, 1e-4);
        for i in 0..8 {
            assert!((lg.grad[i] - fd[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn batch_mean_divides_gradients() {
        let a = logits([1.0, 0., 0., 0., 0., 0., 0., 0.]);
        let b = EmotionLogits::zeros();
        let (loss, grads) = batch_mean(&[a, a], &[b, b], euclidean_logit_loss).unwrap();
        assert_eq!(loss, 0.5);
        assert_eq!(grads[0][0], -0.5);
        assert!(batch_mean(&[a], &[], euclidean_logit_loss).is_err());
    }

    fn arb_logits(bound: f64) -> impl Strategy<Value = EmotionLogits> {
        proptest::array::uniform8(-bound..bound).prop_map(EmotionLogits)
    }

    proptest! {
        #[test]
        fn softmax_normalized_and_shift_invariant(x in arb_logits(100.0), c in -50.0f64..50.0, temp in 0.1f64..10.0) {
            let p = temperature_softmax(&x, t(temp));
            let sum: f64 = p.0.iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12);
            let q = temperature_softmax(&x.shifted(c), t(temp));
            for i in 0..8 {
                prop_assert!((p.0[i] - q.0[i]).abs() <= 1e-12);
            }
        }

        #[test]
        fn gibbs_inequality(x in arb_logits(5.0), y in arb_logits(5.0)) {
            let p = temperature_softmax(&x, t(1.0));
            let q = temperature_softmax(&y, t(1.0));
            prop_assert!(cross_entropy(&p, &q) >= cross_entropy(&p, &p) - 1e-12);
        }

        #[test]
        fn distillation_loss_shift_invariant(x in arb_logits(10.0), y in arb_logits(10.0), c in -10.0f64..10.0) {
            let a = distillation_loss(&x, &y, t(2.0)).loss;
            let b = distillation_loss(&x.shifted(c), &y.shifted(c), t(2.0)).loss;
            prop_assert!((a - b).abs() < 1e-10);
        }
    }
}
