//! The victim: encoder, AAM-softmax training, cosine scoring, trial evaluation.

mod encoder;
mod loss;
mod train;
mod trials;

pub use encoder::{score, Encoder, EncoderConfig, SpeakerEncoder};
pub use loss::aam_softmax_loss;
pub use train::{train_asv, AsvTrainConfig, OptimizerKind, TrainedAsv};
pub use trials::{evaluate_trials, AudioSource, ScoreSet, ScoredTrial, Trial, TrialList};
