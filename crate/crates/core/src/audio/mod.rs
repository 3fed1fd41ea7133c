//! Audio I/O and signal processing: STFT features, pitch tracking, and
//! Griffin-Lim phase reconstruction.

pub mod features;
pub mod griffin_lim;
pub mod pitch;
pub mod stft;
pub mod wav;

pub use features::{extract_features, AcousticFeatures, MEL20_BINS};
