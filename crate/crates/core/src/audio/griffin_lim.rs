//! Phase reconstruction from log-mel spectrograms.
//!
//! Mel inversion goes through a ridge-regularized pseudo-inverse of the mel
//! filterbank; phase is recovered with momentum-accelerated Griffin-Lim.

use ndarray::Array2;
use rustfft::num_complex::Complex;

use super::stft;
use crate::config::Config;

/// `pinv = fb^T (fb fb^T + lambda I)^{-1}`, mapping mel magnitudes back to
/// linear-frequency magnitudes (`bins x n_mels`).
pub fn mel_pseudo_inverse(fb: &Array2<f64>) -> Array2<f64> {
    let m = fb.nrows();
    let mut gram = fb.dot(&fb.t());
    for i in 0..m {
        gram[[i, i]] += 1e-8;
    }
    let inv = cholesky_inverse(&gram);
    fb.t().dot(&inv)
}

/// Dense inverse of a symmetric positive-definite matrix via Cholesky.
fn cholesky_inverse(a: &Array2<f64>) -> Array2<f64> {
    let n = a.nrows();
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                l[[i, j]] = s.max(1e-12).sqrt();
            } else {
                l[[i, j]] = s / l[[j, j]];
            }
        }
    }
    // Solve L L^T X = I column by column.
    let mut inv = Array2::<f64>::zeros((n, n));
    for col in 0..n {
        let mut y = vec![0.0f64; n];
        for i in 0..n {
            let mut s = if i == col { 1.0 } else { 0.0 };
            for k in 0..i {
                s -= l[[i, k]] * y[k];
            }
            y[i] = s / l[[i, i]];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..n {
                s -= l[[k, i]] * inv[[k, col]];
            }
            inv[[i, col]] = s / l[[i, i]];
        }
    }
    inv
}

/// Invert a log-mel spectrogram (`T x n_mels`) to linear magnitudes
/// (`T x bins`), clamped non-negative.
pub fn mel_to_linear(log_mel: &Array2<f64>, fb: &Array2<f64>) -> Array2<f64> {
    let pinv = mel_pseudo_inverse(fb);
    let mel_mag = log_mel.mapv(f64::exp);
    mel_mag.dot(&pinv.t()).mapv(|x| x.max(0.0))
}

/// Momentum Griffin-Lim over a linear magnitude spectrogram.
pub fn griffin_lim(mag: &Array2<f64>, cfg: &Config, iters: usize, momentum: f64) -> Vec<f64> {
    let t = mag.nrows();
    let bins = mag.ncols();
    let mut angles = Array2::<Complex<f64>>::from_elem((t, bins), Complex::new(1.0, 0.0));
    let mut prev: Option<Array2<Complex<f64>>> = None;
    let beta = momentum / (1.0 + momentum);
    for _ in 0..iters {
        let spec = compose(mag, &angles);
        let audio = stft::istft(&spec, cfg);
        let rebuilt = stft::stft(&audio, cfg);
        let update = match &prev {
            Some(p) => &rebuilt - &(p * Complex::new(beta, 0.0)),
            None => rebuilt.clone(),
        };
        angles = update.mapv(|c| {
            let n = c.norm();
            if n > 1e-16 {
                c / n
            } else {
                Complex::new(1.0, 0.0)
            }
        });
        prev = Some(rebuilt);
    }
    let spec = compose(mag, &angles);
    let mut audio = stft::istft(&spec, cfg);
    let peak = audio.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
    if peak > 1.0 {
        let s = 0.98 / peak;
        for x in audio.iter_mut() {
            *x *= s;
        }
    }
    audio
}

/// Full synthesis path: log-mel -> waveform.
///
/// The mel track is padded with silent frames so that every real frame is
/// fully covered by overlapping synthesis windows; the pad is trimmed off
/// afterwards, keeping frame `t` aligned to sample `t * hop`.
pub fn mel_to_audio(log_mel: &Array2<f64>, cfg: &Config) -> Vec<f64> {
    let pad = (cfg.win_length - cfg.hop_length).div_ceil(cfg.hop_length);
    let t = log_mel.nrows();
    let floor = cfg.log_floor.ln();
    let mut padded = Array2::<f64>::from_elem((t + 2 * pad, log_mel.ncols()), floor);
    padded.slice_mut(ndarray::s![pad..pad + t, ..]).assign(log_mel);

    let fb = stft::mel_filterbank(cfg);
    let mag = mel_to_linear(&padded, &fb);
    let audio = griffin_lim(&mag, cfg, cfg.gl_iters, cfg.gl_momentum);

    let start = pad * cfg.hop_length;
    let len = (t - 1) * cfg.hop_length + cfg.win_length;
    audio[start..(start + len).min(audio.len())].to_vec()
}

fn compose(mag: &Array2<f64>, angles: &Array2<Complex<f64>>) -> Array2<Complex<f64>> {
    let mut out = angles.clone();
    ndarray::Zip::from(&mut out).and(mag).for_each(|c, &m| *c *= m);
    out
}

/// Per-bin Pearson correlation between two equally shaped mel tracks,
/// aggregated with variance weights from the reference so that bins that
/// actually carry signal dominate and floor-level leakage bins do not.
pub fn per_bin_correlation(reference: &Array2<f64>, other: &Array2<f64>) -> f64 {
    assert_eq!(reference.shape(), other.shape());
    let mut weighted = 0.0;
    let mut total_w = 0.0;
    for bin in 0..reference.ncols() {
        let x = reference.column(bin);
        let y = other.column(bin);
        let n = x.len() as f64;
        let mx = x.sum() / n;
        let my = y.sum() / n;
        let mut sxy = 0.0;
        let mut sxx = 0.0;
        let mut syy = 0.0;
        for (xv, yv) in x.iter().zip(y.iter()) {
            sxy += (xv - mx) * (yv - my);
            sxx += (xv - mx) * (xv - mx);
            syy += (yv - my) * (yv - my);
        }
        if sxx > 1e-12 && syy > 1e-12 {
            let corr = sxy / (sxx * syy).sqrt();
            let w = sxx / n;
            weighted += w * corr;
            total_w += w;
        }
    }
    if total_w == 0.0 {
        1.0
    } else {
        weighted / total_w
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::features::extract_features;

    #[test]
    fn pseudo_inverse_is_right_inverse_on_row_space() {
        let cfg = Config::default();
        let fb = stft::mel_filterbank(&cfg);
        let pinv = mel_pseudo_inverse(&fb);
        let eye_ish = fb.dot(&pinv);
        for i in 0..cfg.n_mels {
            assert!((eye_ish[[i, i]] - 1.0).abs() < 1e-3, "diag {} = {}", i, eye_ish[[i, i]]);
        }
    }

    #[test]
    fn round_trip_correlation_on_harmonic_tone() {
        let mut cfg = Config::default();
        cfg.gl_iters = 60;
        let sr = 16_000.0;
        let audio: Vec<f64> = (0..32_000)
            .map(|i| {
                let t = i as f64 / sr;
                let f = 180.0 + 20.0 * (2.0 * std::f64::consts::PI * 2.0 * t).sin();
                let ph = 2.0 * std::f64::consts::PI * f * t;
                0.4 * ph.sin() + 0.2 * (2.0 * ph).sin() + 0.1 * (3.0 * ph).sin()
            })
            .collect();
        let feats = extract_features(&audio, 16_000, &cfg).unwrap();
        let wav = mel_to_audio(&feats.mel, &cfg);
        let back = extract_features(&wav, 16_000, &cfg).unwrap();
        let t = feats.frames().min(back.frames());
        let a = feats.mel.slice(ndarray::s![0..t, ..]).to_owned();
        let b = back.mel.slice(ndarray::s![0..t, ..]).to_owned();
        let corr = per_bin_correlation(&a, &b);
        assert!(corr > 0.9, "round-trip correlation {corr}");
    }
}
