//! Deterministic synthetic corpus for tests and smoke training.
//!
//! Utterances come from two prosody regimes ("calm": low, slowly modulated
//! pitch, soft; "excited": high, fast vibrato, loud) spoken by two synthetic
//! speakers that differ only in harmonic tilt. Ground-truth durations fall
//! out of the generator, so every record satisfies sum(durations) == T
//! exactly under the default framing.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::corpus::{Split, TranscriptRow};
use crate::error::Result;
use crate::phonemize::{GraphemePhonemizer, Phonemizer, SP};

const FILLERS: [&str; 12] = [
    "mora", "kanu", "setima", "runo", "maketa", "nisore", "tuma", "akenu", "sori", "temaki",
    "uransa", "koseta",
];
const CALM_WORDS: [&str; 3] = ["murso", "tenor", "somne"];
const EXCITED_WORDS: [&str; 3] = ["kikara", "taketi", "risuku"];

#[derive(Clone, Copy, PartialEq)]
enum Regime {
    Calm,
    Excited,
}

impl Regime {
    fn label(self) -> &'static str {
        match self {
            Regime::Calm => "calm",
            Regime::Excited => "excited",
        }
    }
}

pub struct FixturePaths {
    pub corpus_dir: PathBuf,
    pub text_corpus: PathBuf,
    pub lexicon: PathBuf,
    pub labels: PathBuf,
}

/// Generate a corpus directory: `transcripts.jsonl`, `wav/`, `labels.csv`,
/// `lexicon.json` and `text_corpus.txt`.
pub fn generate_fixture(out_dir: &Path, cfg: &Config, n_utts: usize, seed: u64) -> Result<FixturePaths> {
    std::fs::create_dir_all(out_dir.join("wav"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chapter_size = 10usize;

    let mut transcripts = std::io::BufWriter::new(std::fs::File::create(out_dir.join("transcripts.jsonl"))?);
    let mut labels = std::io::BufWriter::new(std::fs::File::create(out_dir.join("labels.csv"))?);
    writeln!(labels, "id,label")?;

    for idx in 0..n_utts {
        let chapter = idx / chapter_size;
        let regime = if chapter % 2 == 0 { Regime::Calm } else { Regime::Excited };
        let speaker = idx % 2;
        let id = format!("utt{idx:04}");

        let text = sample_text(&mut rng, regime);
        let phonemes = GraphemePhonemizer.phonemize(&text)?;
        let durations = sample_durations(&mut rng, &phonemes, regime);
        let audio = render(&mut rng, &phonemes, &durations, regime, speaker, cfg);
        crate::audio::wav::write_wav_mono(
            &out_dir.join("wav").join(format!("{id}.wav")),
            &audio,
            cfg.sample_rate,
        )?;

        let split = match idx % 10 {
            8 => Split::Val,
            9 => Split::Test,
            _ => Split::Train,
        };
        let row = TranscriptRow {
            id: id.clone(),
            text,
            phonemes,
            speaker_id: format!("spk{speaker}"),
            chapter: format!("ch{chapter}"),
            split,
            durations: Some(durations),
        };
        serde_json::to_writer(&mut transcripts, &row)?;
        transcripts.write_all(b"\n")?;
        writeln!(labels, "{id},{}", regime.label())?;
    }
    transcripts.flush()?;
    labels.flush()?;

    let lexicon = out_dir.join("lexicon.json");
    std::fs::write(&lexicon, lexicon_json())?;

    let text_corpus = out_dir.join("text_corpus.txt");
    let mut tc = std::io::BufWriter::new(std::fs::File::create(&text_corpus)?);
    let mut trng = ChaCha8Rng::seed_from_u64(seed ^ 0x7ea7);
    for _ in 0..200 {
        let regime = if trng.random_range(0..2) == 0 { Regime::Calm } else { Regime::Excited };
        writeln!(tc, "{}", sample_text(&mut trng, regime))?;
    }
    tc.flush()?;

    Ok(FixturePaths {
        corpus_dir: out_dir.to_path_buf(),
        text_corpus,
        lexicon,
        labels: out_dir.join("labels.csv"),
    })
}

/// The emotion lexicon shipped with the fixture: substitution is closed
/// within each regime's word class.
pub fn lexicon_json() -> String {
    let mut map = serde_json::Map::new();
    for class in [&CALM_WORDS[..], &EXCITED_WORDS[..]] {
        for &w in class {
            let subs: Vec<&str> = class.iter().copied().filter(|&s| s != w).collect();
            map.insert(w.to_string(), serde_json::json!(subs));
        }
    }
    serde_json::to_string_pretty(&serde_json::Value::Object(map)).expect("static json")
}

fn sample_text(rng: &mut ChaCha8Rng, regime: Regime) -> String {
    let words = match regime {
        Regime::Calm => &CALM_WORDS,
        Regime::Excited => &EXCITED_WORDS,
    };
    let emotion = words[rng.random_range(0..words.len())];
    let n_fill = rng.random_range(2..=3);
    let mut parts: Vec<&str> = (0..n_fill).map(|_| FILLERS[rng.random_range(0..FILLERS.len())]).collect();
    let pos = rng.random_range(0..=parts.len());
    parts.insert(pos, emotion);
    parts.join(" ")
}

fn is_vowel(p: &str) -> bool {
    matches!(p, "a" | "e" | "i" | "o" | "u")
}

fn sample_durations(rng: &mut ChaCha8Rng, phonemes: &[String], regime: Regime) -> Vec<u32> {
    phonemes
        .iter()
        .map(|p| {
            let (base, jitter) = match (regime, p.as_str(), is_vowel(p)) {
                (Regime::Calm, SP, _) => (4, 1),
                (Regime::Excited, SP, _) => (3, 1),
                (Regime::Calm, _, true) => (9, 2),
                (Regime::Excited, _, true) => (6, 1),
                (Regime::Calm, _, false) => (5, 1),
                (Regime::Excited, _, false) => (4, 1),
            };
            (base + rng.random_range(0..=2 * jitter) - jitter).max(2) as u32
        })
        .collect()
}

fn vowel_profile(p: &str) -> [f64; 4] {
    match p {
        "a" => [1.0, 0.6, 0.35, 0.2],
        "e" => [1.0, 0.35, 0.55, 0.15],
        "i" => [0.9, 0.25, 0.65, 0.3],
        "o" => [1.0, 0.7, 0.2, 0.08],
        "u" => [0.95, 0.6, 0.12, 0.05],
        "n" => [0.6, 0.3, 0.05, 0.0],
        "m" => [0.65, 0.25, 0.04, 0.0],
        "r" => [0.55, 0.2, 0.1, 0.05],
        _ => [0.0; 4],
    }
}

fn render(
    rng: &mut ChaCha8Rng,
    phonemes: &[String],
    durations: &[u32],
    regime: Regime,
    speaker: usize,
    cfg: &Config,
) -> Vec<f64> {
    let sr = cfg.sample_rate as f64;
    let hop = cfg.hop_length;
    let tail = cfg.win_length - cfg.hop_length;
    let (f0_base, f0_depth, f0_rate, amp) = match regime {
        Regime::Calm => (120.0, 8.0, 1.5, 0.35),
        Regime::Excited => (220.0, 30.0, 5.0, 0.6),
    };
    let tilt: [f64; 4] = if speaker == 0 { [1.0, 1.0, 1.0, 1.0] } else { [1.0, 0.6, 1.3, 0.8] };
    let vibrato_phase = rng.random_range(0.0..std::f64::consts::TAU);

    let total: usize = durations.iter().map(|&d| d as usize * hop).sum::<usize>() + tail;
    let mut audio = vec![0.0f64; total];
    let mut phases = [0.0f64; 4];
    let mut pos = 0usize;
    let mut prev_noise = 0.0f64;
    for (pi, p) in phonemes.iter().enumerate() {
        let mut seg = durations[pi] as usize * hop;
        if pi + 1 == phonemes.len() {
            seg += tail;
        }
        let profile = vowel_profile(p);
        let voiced = profile.iter().any(|&a| a > 0.0);
        for j in 0..seg {
            let t = (pos + j) as f64 / sr;
            let f0 = f0_base + f0_depth * (std::f64::consts::TAU * f0_rate * t + vibrato_phase).sin();
            let mut s = 0.0;
            if voiced {
                for h in 0..4 {
                    phases[h] += std::f64::consts::TAU * f0 * (h + 1) as f64 / sr;
                    s += profile[h] * tilt[h] * phases[h].sin();
                }
                s *= amp * 0.5;
                if matches!(p.as_str(), "n" | "m" | "r") {
                    let n: f64 = rng.random_range(-1.0..1.0);
                    s += 0.03 * n;
                }
            } else {
                match p.as_str() {
                    "s" => {
                        // crude high-pass: first difference of white noise
                        let n: f64 = rng.random_range(-1.0..1.0);
                        s = amp * 0.5 * (n - prev_noise);
                        prev_noise = n;
                    }
                    "k" | "t" => {
                        let u = j as f64 / seg as f64;
                        let n: f64 = rng.random_range(-1.0..1.0);
                        s = amp * 0.7 * n * (-6.0 * u).exp();
                    }
                    _ => s = 0.0, // sp
                }
            }
            audio[pos + j] = s;
        }
        pos += durations[pi] as usize * hop;
    }
    audio
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::features::extract_features;
    use crate::audio::wav::read_wav_mono;
    use crate::corpus;

    #[test]
    fn fixture_prepares_cleanly() {
        let cfg = Config::default();
        let dir = tempfile::tempdir().unwrap();
        let corpus_dir = dir.path().join("corpus");
        generate_fixture(&corpus_dir, &cfg, 12, 7).unwrap();

        let prep = dir.path().join("prep");
        let summary = corpus::prepare_corpus(&corpus_dir, &prep, &cfg).unwrap();
        assert_eq!(summary.records, 12);
        let manifest = corpus::Manifest::read_jsonl(&summary.manifest_path).unwrap();
        assert_eq!(manifest.speakers, vec!["spk0".to_string(), "spk1".to_string()]);
        // Durations must match frame counts exactly for every record.
        for r in &manifest.records {
            let f = corpus::read_feature_record(&corpus::cache_path(&summary.cache_dir, &r.id)).unwrap();
            assert_eq!(r.total_frames(), f.frames(), "record {}", r.id);
        }
    }

    #[test]
    fn regimes_differ_in_pitch_and_energy() {
        let cfg = Config::default();
        let dir = tempfile::tempdir().unwrap();
        generate_fixture(dir.path(), &cfg, 20, 11).unwrap();
        // utt0000 is calm (chapter 0), utt0010 is excited (chapter 1).
        let (calm, _) = read_wav_mono(&dir.path().join("wav/utt0000.wav")).unwrap();
        let (excited, _) = read_wav_mono(&dir.path().join("wav/utt0010.wav")).unwrap();
        let fc = extract_features(&calm, 16_000, &cfg).unwrap();
        let fe = extract_features(&excited, 16_000, &cfg).unwrap();
        let mean = |v: &[f64]| {
            let voiced: Vec<f64> = v.iter().copied().filter(|&x| x > 0.0).collect();
            voiced.iter().sum::<f64>() / voiced.len().max(1) as f64
        };
        assert!(mean(&fe.f0) > mean(&fc.f0) + 40.0, "excited pitch should sit clearly higher");
        let e = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(e(&fe.energy) > e(&fc.energy));
    }

    #[test]
    fn deterministic_for_same_seed() {
        let cfg = Config::default();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        generate_fixture(d1.path(), &cfg, 4, 3).unwrap();
        generate_fixture(d2.path(), &cfg, 4, 3).unwrap();
        let a = std::fs::read(d1.path().join("wav/utt0001.wav")).unwrap();
        let b = std::fs::read(d2.path().join("wav/utt0001.wav")).unwrap();
        assert_eq!(a, b);
        let ta = std::fs::read_to_string(d1.path().join("transcripts.jsonl")).unwrap();
        let tb = std::fs::read_to_string(d2.path().join("transcripts.jsonl")).unwrap();
        assert_eq!(ta, tb);
    }
}
