//! Cross-modal emotion distillation.
//!
//! A face-emotion teacher annotates speaking face-tracks with frame-level
//! logits; a spectrogram CNN student is trained to match the
//! temperature-softened teacher distribution from the audio alone. The
//! resulting 8-dimensional predictions are then evaluated as embeddings.
//!
//! Module map:
//!
//! * [`audio`] turns WAV files into normalized 512-row magnitude spectrograms.
//! * [`distill`] holds the temperature softmax and the two training losses.
//! * [`aggregation`] pools frame-level teacher logits into track labels.
//! * [`model`] is the student network with its forward and backward passes.
//! * [`teacher`] reads manifests and frame-logit files and provides a
//!   synthetic band-energy teacher.
//! * [`trainer`] runs SGD with momentum over the distillation objective.
//! * [`eval`] implements ROC AUC, confusion matrices and the affine probe.

pub mod aggregation;
pub mod audio;
pub mod binio;
pub mod checkpoint;
pub mod distill;
mod error;
pub mod eval;
pub mod model;
pub mod rng;
pub mod teacher;
pub mod trainer;

pub use aggregation::{FrameLogitsTrack, Pooling};
pub use audio::{NormalizationStats, Spectrogram, Waveform};
pub use distill::{Emotion, EmotionDistribution, EmotionLogits, Temperature, NUM_EMOTIONS};
pub use error::{Error, Result};
pub use eval::{AffineProbe, EvalReport};
pub use model::{ModelParams, StudentConfig};
pub use teacher::{Manifest, Split, SyntheticTeacherSpec, TrackRecord};
pub use trainer::{LossKind, TrainConfig, TrainHistory};
