//! Two-path expressive TTS for long-form narration.

pub mod config;
pub mod error;
pub mod nn;
pub mod acoustic;
pub mod audio;
pub mod checkpoint;
pub mod corpus;
pub mod fixture;
pub mod par;
pub mod phonemize;
pub mod style_extractor;
pub mod text_style;
pub mod training;

pub use config::{Ablation, Config, NormScope};
pub use error::{Error, Result};
