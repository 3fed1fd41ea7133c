//! Center-free STFT, mel filterbank, and inverse STFT.
//!
//! Framing is left-aligned with no padding: frame `t` covers samples
//! `[t*hop, t*hop + win)`, so `T = floor((len - win)/hop) + 1`.

use ndarray::Array2;
use rustfft::{num_complex::Complex, FftPlanner};

use crate::config::Config;

/// Number of analysis frames for `len` samples, if at least one window fits.
pub fn frame_count(len: usize, win: usize, hop: usize) -> Option<usize> {
    if len < win {
        None
    } else {
        Some((len - win) / hop + 1)
    }
}

/// Periodic Hann window.
pub fn hann(win: usize) -> Vec<f64> {
    (0..win)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / win as f64).cos())
        .collect()
}

/// Complex spectra of every frame: `T x (n_fft/2 + 1)`.
pub fn stft(audio: &[f64], cfg: &Config) -> Array2<Complex<f64>> {
    let win = cfg.win_length;
    let hop = cfg.hop_length;
    let n_fft = cfg.n_fft;
    assert!(n_fft >= win, "n_fft must cover the window");
    let t = frame_count(audio.len(), win, hop).expect("caller checks EmptyAudio");
    let bins = n_fft / 2 + 1;
    let window = hann(win);
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(n_fft);
    let mut out = Array2::<Complex<f64>>::zeros((t, bins));
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    for ti in 0..t {
        for x in buf.iter_mut() {
            *x = Complex::new(0.0, 0.0);
        }
        let start = ti * hop;
        for j in 0..win {
            buf[j] = Complex::new(audio[start + j] * window[j], 0.0);
        }
        fft.process(&mut buf);
        for b in 0..bins {
            out[[ti, b]] = buf[b];
        }
    }
    out
}

/// Magnitude spectrogram `T x bins`.
pub fn magnitude(audio: &[f64], cfg: &Config) -> Array2<f64> {
    stft(audio, cfg).mapv(|c| c.norm())
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filterbank `n_mels x bins`, HTK scale, peak 1.
pub fn mel_filterbank(cfg: &Config) -> Array2<f64> {
    let bins = cfg.n_fft / 2 + 1;
    let n_mels = cfg.n_mels;
    let mel_lo = hz_to_mel(cfg.fmin);
    let mel_hi = hz_to_mel(cfg.fmax);
    let points: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let hz_per_bin = cfg.sample_rate as f64 / cfg.n_fft as f64;
    let mut fb = Array2::<f64>::zeros((n_mels, bins));
    for m in 0..n_mels {
        let (lo, mid, hi) = (points[m], points[m + 1], points[m + 2]);
        for b in 0..bins {
            let f = b as f64 * hz_per_bin;
            let w = if f > lo && f < mid {
                (f - lo) / (mid - lo)
            } else if f >= mid && f < hi {
                (hi - f) / (hi - mid)
            } else {
                0.0
            };
            fb[[m, b]] = w;
        }
    }
    fb
}

/// Overlap-add inverse of `stft`, normalized by the summed squared window.
pub fn istft(spec: &Array2<Complex<f64>>, cfg: &Config) -> Vec<f64> {
    let win = cfg.win_length;
    let hop = cfg.hop_length;
    let n_fft = cfg.n_fft;
    let t = spec.nrows();
    let bins = spec.ncols();
    let len = (t - 1) * hop + win;
    let window = hann(win);
    let mut planner = FftPlanner::new();
    let ifft = planner.plan_fft_inverse(n_fft);
    let mut signal = vec![0.0f64; len];
    let mut norm = vec![0.0f64; len];
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    for ti in 0..t {
        for x in buf.iter_mut() {
            *x = Complex::new(0.0, 0.0);
        }
        for b in 0..bins {
            buf[b] = spec[[ti, b]];
            if b > 0 && b < n_fft - b {
                buf[n_fft - b] = spec[[ti, b]].conj();
            }
        }
        ifft.process(&mut buf);
        let start = ti * hop;
        for j in 0..win {
            let v = buf[j].re / n_fft as f64;
            signal[start + j] += v * window[j];
            norm[start + j] += window[j] * window[j];
        }
    }
    for (s, n) in signal.iter_mut().zip(&norm) {
        *s /= n.max(1e-9);
    }
    signal
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_count_matches_formula() {
        // 1.0 s at 16 kHz with the default window/hop gives 62 frames.
        assert_eq!(frame_count(16_000, 1200, 240), Some(62));
        assert_eq!(frame_count(1199, 1200, 240), None);
        assert_eq!(frame_count(1200, 1200, 240), Some(1));
    }

    #[test]
    fn stft_peak_at_tone_frequency() {
        let cfg = Config::default();
        let f = 1000.0;
        let audio: Vec<f64> = (0..16_000)
            .map(|i| (2.0 * std::f64::consts::PI * f * i as f64 / 16_000.0).sin())
            .collect();
        let mag = magnitude(&audio, &cfg);
        let hz_per_bin = cfg.sample_rate as f64 / cfg.n_fft as f64;
        let row = mag.row(5);
        let peak = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert!((peak as f64 * hz_per_bin - f).abs() < 2.0 * hz_per_bin);
    }

    #[test]
    fn istft_reconstructs_interior() {
        let cfg = Config::default();
        let audio: Vec<f64> = (0..8000)
            .map(|i| (2.0 * std::f64::consts::PI * 523.0 * i as f64 / 16_000.0).sin() * 0.4)
            .collect();
        let spec = stft(&audio, &cfg);
        let rec = istft(&spec, &cfg);
        // Interior samples (fully covered by overlapping windows) match.
        let lo = cfg.win_length;
        let hi = rec.len() - cfg.win_length;
        for i in lo..hi {
            assert!((rec[i] - audio[i]).abs() < 1e-6, "sample {i}: {} vs {}", rec[i], audio[i]);
        }
    }

    #[test]
    fn filterbank_rows_cover_band() {
        let cfg = Config::default();
        let fb = mel_filterbank(&cfg);
        assert_eq!(fb.shape(), &[80, 1025]);
        for m in 0..cfg.n_mels {
            assert!(fb.row(m).sum() > 0.0, "mel filter {m} is empty");
        }
    }
}
