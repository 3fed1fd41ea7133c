//! End-user synthesis: text + context -> mel -> waveform.
//!
//! Inference abandons the style extractor entirely: the checkpoint bundle
//! loaded here has no slot for it, and a call counter guards the contract in
//! tests. The Griffin-Lim fallback vocoder turns predicted mels into 16 kHz
//! mono PCM; an external vocoder can pick up the mel records written next to
//! each WAV.

use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::acoustic::AcousticModel;
use crate::audio::features::AcousticFeatures;
use crate::audio::{griffin_lim, wav};
use crate::config::Config;
use crate::corpus::{FeatureStats, NULL_CONTEXT};
use crate::error::{Error, Result};
use crate::par;
use crate::phonemize::{GraphemePhonemizer, Phonemizer};
use crate::text_style::TextStyleModel;

/// Everything synthesis needs. There is deliberately no style extractor
/// here: it is a training-time teacher only.
pub struct SynthesisCheckpoints {
    pub text: TextStyleModel,
    pub tts: AcousticModel,
    pub stats: FeatureStats,
}

impl SynthesisCheckpoints {
    /// Load `text_style.bvck`, `tts.bvck` and `stats.json` from a directory.
    pub fn load(ckpt_dir: &Path) -> Result<SynthesisCheckpoints> {
        let text = TextStyleModel::load(&ckpt_dir.join("text_style.bvck"))?;
        let tts = AcousticModel::load(&ckpt_dir.join("tts.bvck"))?;
        let stats_path = ckpt_dir.join("stats.json");
        let stats = if stats_path.exists() {
            FeatureStats::load(&stats_path)?
        } else {
            FeatureStats::default()
        };
        Ok(SynthesisCheckpoints { text, tts, stats })
    }

    pub fn config(&self) -> &Config {
        &self.tts.cfg
    }
}

pub struct SynthesisOutput {
    pub wav_path: PathBuf,
    pub mel_path: PathBuf,
    pub mel: Array2<f64>,
    pub durations: Vec<u32>,
}

/// Pad past/future neighbors to a `2k+1` window centered on `text`.
pub fn padded_window(text: &str, past: &[String], future: &[String], k: usize) -> Vec<String> {
    let mut window = Vec::with_capacity(2 * k + 1);
    for i in 0..k {
        // Take the k nearest past sentences, padding the far end.
        let need = k - i;
        window.push(if need <= past.len() {
            past[past.len() - need].clone()
        } else {
            NULL_CONTEXT.to_string()
        });
    }
    window.push(text.to_string());
    for i in 0..k {
        window.push(future.get(i).cloned().unwrap_or_else(|| NULL_CONTEXT.to_string()));
    }
    window
}

/// Synthesize one utterance to `out_wav`, writing the predicted mel (plus
/// frame-level pitch/energy derived from the predictors) as a feature-cache
/// record alongside it.
pub fn synthesize(
    ckpts: &SynthesisCheckpoints,
    text: &str,
    past: &[String],
    future: &[String],
    out_wav: &Path,
) -> Result<SynthesisOutput> {
    let cfg = ckpts.config().clone();
    let symbols = GraphemePhonemizer.phonemize(text)?;
    // Symbols outside the trained inventory are skipped.
    let known: Vec<String> = symbols
        .into_iter()
        .filter(|s| ckpts.tts.phoneme_inventory.iter().any(|p| p == s))
        .collect();
    if known.is_empty() {
        return Err(Error::Phonemize(format!(
            "no phonemes of {text:?} are in the model inventory"
        )));
    }
    let ids = ckpts.tts.map_phonemes(&known)?;

    let window = padded_window(text, past, future, cfg.context_k);
    let h_s = ckpts.text.encode_style(text);
    let h_cs = ckpts.text.encode_context(&window)?;
    let out = ckpts.tts.forward_infer(&ids, &h_s, &h_cs)?;

    // Frame-level tracks from the phoneme-level predictions, denormalized.
    let t_frames: usize = out.durations.iter().map(|&d| d as usize).sum();
    let mut f0 = Vec::with_capacity(t_frames);
    let mut energy = Vec::with_capacity(t_frames);
    for (i, &d) in out.durations.iter().enumerate() {
        let fv = ckpts.stats.denorm_f0(out.pitch[i], "");
        let ev = ckpts.stats.denorm_energy(out.energy[i], "");
        for _ in 0..d {
            f0.push(fv.max(0.0));
            energy.push(ev.max(0.0));
        }
    }

    let audio = griffin_lim::mel_to_audio(&out.mel, &cfg);
    if let Some(parent) = out_wav.parent() {
        std::fs::create_dir_all(parent)?;
    }
    wav::write_wav_mono(out_wav, &audio, cfg.sample_rate)?;

    let mel20 = AcousticFeatures::slice_mel20(&out.mel);
    let feats = AcousticFeatures { mel: out.mel.clone(), f0, energy, mel20 };
    let mel_path = out_wav.with_extension("styb");
    crate::corpus::write_feature_record(&mel_path, &feats)?;

    Ok(SynthesisOutput { wav_path: out_wav.to_path_buf(), mel_path, mel: out.mel, durations: out.durations })
}

/// Synthesize a paragraph sentence by sentence, each with a sliding context
/// window centered on it. Outputs are `0001.wav .. NNNN.wav` in input order
/// plus a concatenated `paragraph.wav`.
pub fn synthesize_paragraph(
    ckpts: &SynthesisCheckpoints,
    sentences: &[String],
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    if sentences.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    std::fs::create_dir_all(out_dir)?;
    let k = ckpts.config().context_k;
    let jobs: Vec<usize> = (0..sentences.len()).collect();
    let outputs: Vec<Result<PathBuf>> = par::par_map(&jobs, |&i| {
        let past = &sentences[i.saturating_sub(k)..i];
        let future = &sentences[(i + 1).min(sentences.len())..(i + 1 + k).min(sentences.len())];
        let out_wav = out_dir.join(format!("{:04}.wav", i + 1));
        synthesize(ckpts, &sentences[i], past, future, &out_wav).map(|o| o.wav_path)
    });
    let paths = outputs.into_iter().collect::<Result<Vec<_>>>()?;

    // Concatenated render for listening through the paragraph.
    let mut all = Vec::new();
    for p in &paths {
        let (samples, _) = wav::read_wav_mono(p)?;
        all.extend(samples);
    }
    wav::write_wav_mono(&out_dir.join("paragraph.wav"), &all, ckpts.config().sample_rate)?;
    Ok(paths)
}
