//! Pooling frame-level teacher logits into track-level supervision.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::distill::{Emotion, EmotionLogits, NUM_EMOTIONS};
use crate::{Error, Result};

/// Spacing of teacher frames along a face-track, in seconds.
pub const FRAME_INTERVAL_S: f64 = 0.24;

#[derive(Debug, Clone, PartialEq)]
pub struct FrameLogitsTrack {
    pub track_id: String,
    pub frames: Vec<EmotionLogits>,
    pub frame_interval_s: f64,
}

impl FrameLogitsTrack {
    pub fn new(track_id: impl Into<String>, frames: Vec<EmotionLogits>) -> Result<Self> {
        let track_id = track_id.into();
        if frames.is_empty() {
            return Err(Error::Empty(format!("track `{track_id}` has no frames")));
        }
        Ok(Self {
            track_id,
            frames,
            frame_interval_s: FRAME_INTERVAL_S,
        })
    }

    /// Frames whose interval `[k*dt, (k+1)*dt)` overlaps `[start_s, end_s)`.
    /// Partially covered frames are included. Never empty: if the window
    /// lies past the last frame, the last frame is returned.
    pub fn frames_overlapping(&self, start_s: f64, end_s: f64) -> &[EmotionLogits] {
        let dt = self.frame_interval_s;
        let n = self.frames.len();
        let first = ((start_s / dt).floor().max(0.0) as usize).min(n - 1);
        let last = ((end_s / dt).ceil() as usize).clamp(first + 1, n);
        &self.frames[first..last]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Max,
    Avg,
}

impl Pooling {
    pub fn pool(self, frames: &[EmotionLogits]) -> Result<EmotionLogits> {
        match self {
            Pooling::Max => maxpool(frames),
            Pooling::Avg => avgpool(frames),
        }
    }
}

impl std::str::FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(Pooling::Max),
            "avg" => Ok(Pooling::Avg),
            other => Err(Error::InvalidArgument(format!("unknown pooling `{other}`"))),
        }
    }
}

/// Elementwise maximum of a non-empty slice of logits.
pub fn maxpool(frames: &[EmotionLogits]) -> Result<EmotionLogits> {
    let (first, rest) = frames
        .split_first()
        .ok_or_else(|| Error::Empty("cannot pool zero frames".into()))?;
    let mut out = first.0;
    for f in rest {
        for (o, v) in out.iter_mut().zip(f.0) {
            *o = o.max(v);
        }
    }
    Ok(EmotionLogits(out))
}

/// Elementwise arithmetic mean of a non-empty slice of logits.
pub fn avgpool(frames: &[EmotionLogits]) -> Result<EmotionLogits> {
    if frames.is_empty() {
        return Err(Error::Empty("cannot pool zero frames".into()));
    }
    let mut out = [0.0; NUM_EMOTIONS];
    for f in frames {
        for (o, v) in out.iter_mut().zip(f.0) {
            *o += v;
        }
    }
    let n = frames.len() as f64;
    Ok(EmotionLogits(out.map(|v| v / n)))
}

pub fn maxpool_track(t: &FrameLogitsTrack) -> Result<EmotionLogits> {
    maxpool(&t.frames)
}

pub fn avgpool_track(t: &FrameLogitsTrack) -> Result<EmotionLogits> {
    avgpool(&t.frames)
}

/// Index of the largest logit; ties go to the lowest index.
pub fn dominant_emotion(x: &EmotionLogits) -> usize {
    let mut best = 0;
    for i in 1..NUM_EMOTIONS {
        if x.0[i] > x.0[best] {
            best = i;
        }
    }
    best
}

/// Counts of dominant emotions, indexed in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmotionHistogram(pub [u64; NUM_EMOTIONS]);

impl EmotionHistogram {
    pub fn total(&self) -> u64 {
        self.0.iter().sum()
    }

    pub fn to_json(&self) -> serde_json::Value {
        let map: BTreeMap<&str, u64> = Emotion::ALL
            .iter()
            .map(|e| (e.name(), self.0[e.index()]))
            .collect();
        serde_json::to_value(map).expect("string keys")
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("emotion,count\n");
        for e in Emotion::ALL {
            let _ = writeln!(s, "{},{}", e.name(), self.0[e.index()]);
        }
        s
    }
}

pub fn emotion_histogram<'a, I>(items: I) -> Result<EmotionHistogram>
where
    I: IntoIterator<Item = &'a EmotionLogits>,
{
    let mut counts = [0u64; NUM_EMOTIONS];
    let mut any = false;
    for x in items {
        counts[dominant_emotion(x)] += 1;
        any = true;
    }
    if !any {
        return Err(Error::Empty("histogram over zero items".into()));
    }
    Ok(EmotionHistogram(counts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn l(v: [f64; 8]) -> EmotionLogits {
        EmotionLogits(v)
    }

    #[test]
    fn pooling_reference_cases() {
        let t = FrameLogitsTrack::new(
            "a",
            vec![l([1., 2., 0., 0., 0., 0., 0., 0.]), l([3., 0., 0., 0., 0., 0., 0., 0.])],
        )
        .unwrap();
        assert_eq!(maxpool_track(&t).unwrap(), l([3., 2., 0., 0., 0., 0., 0., 0.]));
        assert_eq!(avgpool_track(&t).unwrap(), l([2., 1., 0., 0., 0., 0., 0., 0.]));

        let single = FrameLogitsTrack::new("b", vec![l([0.5; 8])]).unwrap();
        assert_eq!(maxpool_track(&single).unwrap(), l([0.5; 8]));
        assert_eq!(avgpool_track(&single).unwrap(), l([0.5; 8]));
        assert!(FrameLogitsTrack::new("c", vec![]).is_err());
        assert!(maxpool(&[]).is_err());
        assert!(avgpool(&[]).is_err());
    }

    #[test]
    fn dominant_and_ties() {
        assert_eq!(dominant_emotion(&l([0., 5., 0., 0., 0., 0., 0., 0.])), 1);
        assert_eq!(dominant_emotion(&l([2.0; 8])), 0);
        assert_eq!(dominant_emotion(&l([0., 1., 1., 0., 0., 0., 0., 0.])), 1);
    }

    #[test]
    fn histogram_counts() {
        let items = vec![l([1., 0., 0., 0., 0., 0., 0., 0.]); 3];
        let h = emotion_histogram(&items).unwrap();
        assert_eq!(h.0, [3, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(h.to_json()["neutral"], 3);
        assert!(h.to_csv().starts_with("emotion,count\nneutral,3\n"));
        assert!(emotion_histogram(&Vec::<EmotionLogits>::new()).is_err());
    }

    #[test]
    fn overlapping_frames() {
        let frames: Vec<_> = (0..10).map(|i| l([i as f64; 8])).collect();
        let t = FrameLogitsTrack::new("x", frames).unwrap();
        // [0.5, 1.0) touches frames 2, 3 and 4 (0.48..0.72, 0.72..0.96, 0.96..1.2).
        let w = t.frames_overlapping(0.5, 1.0);
        assert_eq!(w.len(), 3);
        assert_eq!(w[0].0[0], 2.0);
        assert_eq!(t.frames_overlapping(0.0, 100.0).len(), 10);
        assert_eq!(t.frames_overlapping(50.0, 54.0).len(), 1);
    }

    proptest! {
        #[test]
        fn avg_bounded_by_max(frames in proptest::collection::vec(proptest::array::uniform8(-10.0f64..10.0), 1..20)) {
            let frames: Vec<_> = frames.into_iter().map(EmotionLogits).collect();
            let mx = maxpool(&frames).unwrap();
            let av = avgpool(&frames).unwrap();
            for i in 0..8 {
                prop_assert!(av.0[i] <= mx.0[i] + 1e-12);
            }
            let again = maxpool(&[mx]).unwrap();
            prop_assert_eq!(again, mx);
        }

        #[test]
        fn dominant_shift_invariant(v in proptest::array::uniform8(-10.0f64..10.0), c in -5.0f64..5.0) {
            let x = EmotionLogits(v);
            prop_assert_eq!(dominant_emotion(&x), dominant_emotion(&x.shifted(c)));
        }
    }
}
