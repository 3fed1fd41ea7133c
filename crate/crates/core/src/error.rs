//! Crate-wide error type.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("audio too short: {samples} samples, need at least one window of {window}")]
    EmptyAudio { samples: usize, window: usize },

    #[error("sample rate mismatch: expected {expected} Hz, got {got} Hz (no silent resampling)")]
    SampleRateMismatch { expected: u32, got: u32 },

    #[error("unknown utterance id `{0}`")]
    UnknownUtterance(String),

    #[error("duration/frame mismatch: durations sum to {sum} but features have {frames} frames (tolerance {tolerance})")]
    AlignmentMismatch { sum: i64, frames: i64, tolerance: i64 },

    #[error("context window must have odd length, got {0}")]
    BadWindow(usize),

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("contrastive batch of size {0} has no negatives; need at least 2")]
    ContrastiveBatchTooSmall(usize),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("phoneme `{0}` is not in the inventory")]
    UnknownPhoneme(String),

    #[error("length regulation over all-zero durations produces an empty sequence")]
    EmptyExpansion,

    #[error("training mode requires ground-truth targets (durations, pitch, energy)")]
    MissingTargets,

    #[error("frozen contract violated: {0}")]
    FrozenContractViolation(String),

    #[error("checkpoint missing: {0}")]
    CheckpointMissing(PathBuf),

    #[error("stage ordering violated: {0}")]
    StageOrderViolation(String),

    #[error("no frames where both pitch tracks are voiced")]
    NoVoicedOverlap,

    #[error("cannot phonemize text: {0}")]
    Phonemize(String),

    #[error("invalid emotion lexicon: {0}")]
    InvalidLexicon(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Wav(#[from] hound::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
