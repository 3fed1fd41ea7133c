//! Acoustic feature extraction: log-mel spectrogram, frame F0, frame energy
//! and the low-band Mel20 slice.

use ndarray::{s, Array2};

use super::{pitch, stft};
use crate::config::Config;
use crate::error::{Error, Result};

pub const MEL20_BINS: usize = 20;

/// Per-utterance acoustic features; all tracks share the frame count `T`.
#[derive(Debug, Clone, PartialEq)]
pub struct AcousticFeatures {
    /// Log-mel magnitudes, `T x n_mels`.
    pub mel: Array2<f64>,
    /// F0 in Hz, 0.0 at unvoiced frames.
    pub f0: Vec<f64>,
    /// Per-frame L2 norm of the linear magnitude spectrum.
    pub energy: Vec<f64>,
    /// Leading 20 mel bins, `T x 20`.
    pub mel20: Array2<f64>,
}

impl AcousticFeatures {
    pub fn frames(&self) -> usize {
        self.mel.nrows()
    }

    /// Rebuild the mel20 slice from mel (used after deserializing).
    pub fn slice_mel20(mel: &Array2<f64>) -> Array2<f64> {
        mel.slice(s![.., 0..MEL20_BINS]).to_owned()
    }
}

/// Extract all features for mono audio at the configured sample rate.
/// No resampling: a mismatched rate is an error.
pub fn extract_features(audio: &[f64], sample_rate: u32, cfg: &Config) -> Result<AcousticFeatures> {
    if sample_rate != cfg.sample_rate {
        return Err(Error::SampleRateMismatch { expected: cfg.sample_rate, got: sample_rate });
    }
    let frames = stft::frame_count(audio.len(), cfg.win_length, cfg.hop_length)
        .ok_or(Error::EmptyAudio { samples: audio.len(), window: cfg.win_length })?;

    let mag = stft::magnitude(audio, cfg);
    let energy: Vec<f64> = mag
        .rows()
        .into_iter()
        .map(|row| row.fold(0.0, |s, &v| s + v * v).sqrt())
        .collect();

    let fb = stft::mel_filterbank(cfg);
    let mel_lin = mag.dot(&fb.t());
    let mel = mel_lin.mapv(|x| x.max(cfg.log_floor).ln());
    let f0 = pitch::f0_track(audio, frames, cfg);
    let mel20 = AcousticFeatures::slice_mel20(&mel);
    Ok(AcousticFeatures { mel, f0, energy, mel20 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_second_is_62_frames() {
        let cfg = Config::default();
        let audio: Vec<f64> = (0..16_000)
            .map(|i| (2.0 * std::f64::consts::PI * 220.0 * i as f64 / 16_000.0).sin() * 0.4)
            .collect();
        let f = extract_features(&audio, 16_000, &cfg).unwrap();
        assert_eq!(f.frames(), 62);
        assert_eq!(f.f0.len(), 62);
        assert_eq!(f.energy.len(), 62);
        assert_eq!(f.mel20.shape(), &[62, 20]);
    }

    #[test]
    fn silence_has_zero_energy_and_f0() {
        let cfg = Config::default();
        let f = extract_features(&vec![0.0; 16_000], 16_000, &cfg).unwrap();
        assert!(f.energy.iter().all(|&e| e == 0.0));
        assert!(f.f0.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn frame_rate_is_66_67() {
        let cfg = Config::default();
        assert!((cfg.frame_rate() - 66.666_666_666_7).abs() < 1e-3);
    }

    #[test]
    fn errors_on_short_or_wrong_rate() {
        let cfg = Config::default();
        match extract_features(&vec![0.0; 100], 16_000, &cfg) {
            Err(Error::EmptyAudio { .. }) => {}
            other => panic!("expected EmptyAudio, got {other:?}"),
        }
        match extract_features(&vec![0.0; 16_000], 22_050, &cfg) {
            Err(Error::SampleRateMismatch { expected: 16_000, got: 22_050 }) => {}
            other => panic!("expected SampleRateMismatch, got {other:?}"),
        }
    }

    #[test]
    fn deterministic_bit_identical() {
        let cfg = Config::default();
        let audio: Vec<f64> = (0..20_000)
            .map(|i| (2.0 * std::f64::consts::PI * 180.0 * i as f64 / 16_000.0).sin() * 0.3)
            .collect();
        let a = extract_features(&audio, 16_000, &cfg).unwrap();
        let b = extract_features(&audio, 16_000, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mel20_is_leading_columns_bit_exact() {
        let cfg = Config::default();
        let audio: Vec<f64> = (0..16_000)
            .map(|i| (2.0 * std::f64::consts::PI * 140.0 * i as f64 / 16_000.0).sin() * 0.5)
            .collect();
        let f = extract_features(&audio, 16_000, &cfg).unwrap();
        for t in 0..f.frames() {
            for b in 0..MEL20_BINS {
                assert_eq!(f.mel20[[t, b]], f.mel[[t, b]]);
            }
        }
        // Pure projection: editing bins >= 20 cannot touch the slice.
        let mut mel = f.mel.clone();
        for t in 0..mel.nrows() {
            for b in MEL20_BINS..mel.ncols() {
                mel[[t, b]] += 42.0;
            }
        }
        let resliced = AcousticFeatures::slice_mel20(&mel);
        assert_eq!(resliced, f.mel20);
    }
}
