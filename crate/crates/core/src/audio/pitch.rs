//! Frame-level F0 tracking via the YIN difference function.
//!
//! Unvoiced and silent frames get 0.0; voiced estimates are clamped to the
//! configured [f0_min, f0_max] band.

use crate::config::Config;

const SILENCE_RMS: f64 = 1e-4;

/// F0 per analysis frame, aligned with the STFT framing.
pub fn f0_track(audio: &[f64], frames: usize, cfg: &Config) -> Vec<f64> {
    let sr = cfg.sample_rate as f64;
    let win = cfg.win_length;
    let hop = cfg.hop_length;
    let tau_min = (sr / cfg.f0_max).floor().max(2.0) as usize;
    let tau_max = ((sr / cfg.f0_min).ceil() as usize).min(win / 2 - 1);
    (0..frames)
        .map(|t| f0_frame(&audio[t * hop..t * hop + win], sr, tau_min, tau_max, cfg))
        .collect()
}

fn f0_frame(frame: &[f64], sr: f64, tau_min: usize, tau_max: usize, cfg: &Config) -> f64 {
    let w = frame.len() / 2;
    let rms = (frame.iter().map(|x| x * x).sum::<f64>() / frame.len() as f64).sqrt();
    if rms < SILENCE_RMS {
        return 0.0;
    }

    // Difference function and its cumulative mean normalization.
    let mut diff = vec![0.0f64; tau_max + 1];
    for (tau, d) in diff.iter_mut().enumerate().skip(1) {
        let mut acc = 0.0;
        for j in 0..w {
            let delta = frame[j] - frame[j + tau];
            acc += delta * delta;
        }
        *d = acc;
    }
    let mut cmndf = vec![1.0f64; tau_max + 1];
    let mut running = 0.0;
    for tau in 1..=tau_max {
        running += diff[tau];
        cmndf[tau] = if running > 0.0 { diff[tau] * tau as f64 / running } else { 1.0 };
    }

    // First dip under threshold wins; otherwise take the global minimum and
    // treat the frame as unvoiced if it is still weak.
    let mut tau_star = 0usize;
    for tau in tau_min..=tau_max {
        if cmndf[tau] < cfg.f0_threshold {
            let mut best = tau;
            while best + 1 <= tau_max && cmndf[best + 1] < cmndf[best] {
                best += 1;
            }
            tau_star = best;
            break;
        }
    }
    if tau_star == 0 {
        let (best, &val) = cmndf[tau_min..=tau_max]
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap();
        if val >= cfg.f0_threshold * 2.0 {
            return 0.0;
        }
        tau_star = best + tau_min;
    }

    // Parabolic refinement around the selected lag.
    let tau_refined = if tau_star > tau_min && tau_star < tau_max {
        let (a, b, c) = (cmndf[tau_star - 1], cmndf[tau_star], cmndf[tau_star + 1]);
        let denom = a - 2.0 * b + c;
        if denom.abs() > 1e-12 {
            tau_star as f64 + 0.5 * (a - c) / denom
        } else {
            tau_star as f64
        }
    } else {
        tau_star as f64
    };

    let f0 = sr / tau_refined;
    if f0 < cfg.f0_min || f0 > cfg.f0_max {
        0.0
    } else {
        f0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, secs: f64, sr: f64) -> Vec<f64> {
        (0..(secs * sr) as usize)
            .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / sr).sin() * 0.5)
            .collect()
    }

    #[test]
    fn tracks_pure_tone() {
        let cfg = Config::default();
        let audio = tone(150.0, 1.0, 16_000.0);
        let t = crate::audio::stft::frame_count(audio.len(), cfg.win_length, cfg.hop_length).unwrap();
        let f0 = f0_track(&audio, t, &cfg);
        let voiced: Vec<f64> = f0.iter().copied().filter(|&x| x > 0.0).collect();
        assert!(voiced.len() > t / 2, "most frames should be voiced");
        for v in voiced {
            assert!((v - 150.0).abs() < 3.0, "got {v}");
        }
    }

    #[test]
    fn silence_is_unvoiced() {
        let cfg = Config::default();
        let audio = vec![0.0; 16_000];
        let f0 = f0_track(&audio, 62, &cfg);
        assert!(f0.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn noise_is_mostly_unvoiced() {
        use rand::{Rng, SeedableRng};
        let cfg = Config::default();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let audio: Vec<f64> = (0..16_000).map(|_| rng.random_range(-0.3..0.3)).collect();
        let f0 = f0_track(&audio, 62, &cfg);
        let voiced = f0.iter().filter(|&&x| x > 0.0).count();
        assert!(voiced < 10, "white noise produced {voiced} voiced frames");
    }
}
