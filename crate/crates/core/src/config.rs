//! Flat key-value configuration shared by every pipeline stage.
//!
//! The on-disk format is one `key = value` pair per line; `#` starts a
//! comment. Values are strings, numbers or booleans. Unknown keys are
//! rejected so typos fail loudly. The config hash is computed over the
//! sorted key set and is therefore stable under key reordering.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Scope for pitch/energy z-score normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormScope {
    Global,
    Speaker,
}

/// Ablation switches for the TTS training stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    None,
    NoStyleEncoder,
    NoStyleDecoder,
    NoStyleExtractor,
}

impl std::str::FromStr for Ablation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Ablation::None),
            "no_style_encoder" => Ok(Ablation::NoStyleEncoder),
            "no_style_decoder" => Ok(Ablation::NoStyleDecoder),
            "no_style_extractor" => Ok(Ablation::NoStyleExtractor),
            other => Err(Error::Config(format!("unknown ablation `{other}`"))),
        }
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Ablation::None => "none",
            Ablation::NoStyleEncoder => "no_style_encoder",
            Ablation::NoStyleDecoder => "no_style_decoder",
            Ablation::NoStyleExtractor => "no_style_extractor",
        };
        f.write_str(s)
    }
}

/// Every tunable in one place. Defaults follow the reference setup
/// (16 kHz audio, 80-mel frames of 1200/240, codebook of 512, alpha 1).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Config {
    // Audio / features
    pub sample_rate: u32,
    pub win_length: usize,
    pub hop_length: usize,
    pub n_fft: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub log_floor: f64,
    pub f0_min: f64,
    pub f0_max: f64,
    pub f0_threshold: f64,
    pub duration_tolerance: i64,
    pub context_k: usize,
    pub norm_scope: NormScope,

    // Acoustic model
    pub d_model: usize,
    pub d_style: usize,
    pub n_heads: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub conv_kernel: usize,
    pub ffn_hidden: usize,
    pub predictor_kernel: usize,
    pub embed_kernel: usize,
    pub style_decoder_layers: usize,
    pub style_decoder_kernel: usize,

    // Text style encoder
    pub text_dim: usize,
    pub text_layers: usize,
    pub text_heads: usize,
    pub text_ffn_hidden: usize,
    pub temperature: f64,
    pub clusters: usize,
    pub cluster_weight: f64,
    pub recon_weight: f64,

    // Style extractor (VQ-VAE)
    pub codebook_size: usize,
    pub commitment_beta: f64,
    pub vq_channels1: usize,
    pub vq_channels2: usize,
    pub vq_resblocks: usize,
    pub vq_kernel: usize,
    pub speaker_dim: usize,
    pub vq_ema: bool,
    pub vq_ema_decay: f64,
    pub vq_restart_dead: bool,
    pub vq_pre_quant_style: bool,

    // Optimization
    pub batch_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub learning_rate: f64,
    pub warmup_steps: u64,
    pub seed: u64,
    pub alpha: f64,
    pub max_steps: u64,
    pub ablation: Ablation,

    // Per-stage epoch counts
    pub text_phase1_epochs: usize,
    pub text_phase2_epochs: usize,
    pub extractor_epochs: usize,
    pub tts_epochs: usize,

    // Synthesis
    pub gl_iters: usize,
    pub gl_momentum: f64,

    // Evaluation
    pub mcd_order: usize,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            sample_rate: 16_000,
            win_length: 1200,
            hop_length: 240,
            n_fft: 2048,
            n_mels: 80,
            fmin: 0.0,
            fmax: 8000.0,
            log_floor: 1e-5,
            f0_min: 60.0,
            f0_max: 400.0,
            f0_threshold: 0.15,
            duration_tolerance: 3,
            context_k: 2,
            norm_scope: NormScope::Global,

            d_model: 256,
            d_style: 256,
            n_heads: 2,
            encoder_blocks: 4,
            decoder_blocks: 4,
            conv_kernel: 9,
            ffn_hidden: 1024,
            predictor_kernel: 3,
            embed_kernel: 3,
            style_decoder_layers: 2,
            style_decoder_kernel: 9,

            text_dim: 256,
            text_layers: 4,
            text_heads: 4,
            text_ffn_hidden: 1024,
            temperature: 0.1,
            clusters: 8,
            cluster_weight: 0.5,
            recon_weight: 0.5,

            codebook_size: 512,
            commitment_beta: 0.25,
            vq_channels1: 64,
            vq_channels2: 128,
            vq_resblocks: 3,
            vq_kernel: 3,
            speaker_dim: 64,
            vq_ema: false,
            vq_ema_decay: 0.99,
            vq_restart_dead: false,
            vq_pre_quant_style: false,

            batch_size: 16,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_eps: 1e-9,
            learning_rate: 1e-3,
            warmup_steps: 400,
            seed: 42,
            alpha: 1.0,
            max_steps: 0,
            ablation: Ablation::None,

            text_phase1_epochs: 8,
            text_phase2_epochs: 4,
            extractor_epochs: 30,
            tts_epochs: 50,

            gl_iters: 60,
            gl_momentum: 0.99,

            mcd_order: 13,
        }
    }
}

impl Config {
    /// Parse a flat key-value file, overriding defaults.
    pub fn from_file(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path)?;
        Self::from_str_contents(&text)
    }

    pub fn from_str_contents(text: &str) -> Result<Config> {
        let mut cfg = Config::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    /// Set a single field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("bad value `{v}` for key `{key}`")))
        }
        match key {
            "sample_rate" => self.sample_rate = p(key, value)?,
            "win_length" => self.win_length = p(key, value)?,
            "hop_length" => self.hop_length = p(key, value)?,
            "n_fft" => self.n_fft = p(key, value)?,
            "n_mels" => self.n_mels = p(key, value)?,
            "fmin" => self.fmin = p(key, value)?,
            "fmax" => self.fmax = p(key, value)?,
            "log_floor" => self.log_floor = p(key, value)?,
            "f0_min" => self.f0_min = p(key, value)?,
            "f0_max" => self.f0_max = p(key, value)?,
            "f0_threshold" => self.f0_threshold = p(key, value)?,
            "duration_tolerance" => self.duration_tolerance = p(key, value)?,
            "context_k" => self.context_k = p(key, value)?,
            "norm_scope" => {
                self.norm_scope = match value {
                    "global" => NormScope::Global,
                    "speaker" => NormScope::Speaker,
                    _ => return Err(Error::Config(format!("bad norm_scope `{value}`"))),
                }
            }
            "d_model" => self.d_model = p(key, value)?,
            "d_style" => self.d_style = p(key, value)?,
            "n_heads" => self.n_heads = p(key, value)?,
            "encoder_blocks" => self.encoder_blocks = p(key, value)?,
            "decoder_blocks" => self.decoder_blocks = p(key, value)?,
            "conv_kernel" => self.conv_kernel = p(key, value)?,
            "ffn_hidden" => self.ffn_hidden = p(key, value)?,
            "predictor_kernel" => self.predictor_kernel = p(key, value)?,
            "embed_kernel" => self.embed_kernel = p(key, value)?,
            "style_decoder_layers" => self.style_decoder_layers = p(key, value)?,
            "style_decoder_kernel" => self.style_decoder_kernel = p(key, value)?,
            "text_dim" => self.text_dim = p(key, value)?,
            "text_layers" => self.text_layers = p(key, value)?,
            "text_heads" => self.text_heads = p(key, value)?,
            "text_ffn_hidden" => self.text_ffn_hidden = p(key, value)?,
            "temperature" => self.temperature = p(key, value)?,
            "clusters" => self.clusters = p(key, value)?,
            "cluster_weight" => self.cluster_weight = p(key, value)?,
            "recon_weight" => self.recon_weight = p(key, value)?,
            "codebook_size" => self.codebook_size = p(key, value)?,
            "commitment_beta" => self.commitment_beta = p(key, value)?,
            "vq_channels1" => self.vq_channels1 = p(key, value)?,
            "vq_channels2" => self.vq_channels2 = p(key, value)?,
            "vq_resblocks" => self.vq_resblocks = p(key, value)?,
            "vq_kernel" => self.vq_kernel = p(key, value)?,
            "speaker_dim" => self.speaker_dim = p(key, value)?,
            "vq_ema" => self.vq_ema = p(key, value)?,
            "vq_ema_decay" => self.vq_ema_decay = p(key, value)?,
            "vq_restart_dead" => self.vq_restart_dead = p(key, value)?,
            "vq_pre_quant_style" => self.vq_pre_quant_style = p(key, value)?,
            "batch_size" => self.batch_size = p(key, value)?,
            "adam_beta1" => self.adam_beta1 = p(key, value)?,
            "adam_beta2" => self.adam_beta2 = p(key, value)?,
            "adam_eps" => self.adam_eps = p(key, value)?,
            "learning_rate" => self.learning_rate = p(key, value)?,
            "warmup_steps" => self.warmup_steps = p(key, value)?,
            "seed" => self.seed = p(key, value)?,
            "alpha" => {
                self.alpha = p(key, value)?;
                if self.alpha < 0.0 {
                    return Err(Error::Config("alpha must be >= 0".into()));
                }
            }
            "max_steps" => self.max_steps = p(key, value)?,
            "ablation" => self.ablation = value.parse()?,
            "text_phase1_epochs" => self.text_phase1_epochs = p(key, value)?,
            "text_phase2_epochs" => self.text_phase2_epochs = p(key, value)?,
            "extractor_epochs" => self.extractor_epochs = p(key, value)?,
            "tts_epochs" => self.tts_epochs = p(key, value)?,
            "gl_iters" => self.gl_iters = p(key, value)?,
            "gl_momentum" => self.gl_momentum = p(key, value)?,
            "mcd_order" => self.mcd_order = p(key, value)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Canonical flat rendering: sorted keys, one per line.
    pub fn to_flat_pairs(&self) -> BTreeMap<String, String> {
        let json = serde_json::to_value(self).expect("config serializes");
        let mut map = BTreeMap::new();
        if let serde_json::Value::Object(obj) = json {
            for (k, v) in obj {
                let s = match v {
                    serde_json::Value::String(s) => s,
                    other => other.to_string(),
                };
                map.insert(k, s);
            }
        }
        map
    }

    /// Hash over the sorted key/value pairs; stable under reordering.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        for (k, v) in self.to_flat_pairs() {
            hasher.update(k.as_bytes());
            hasher.update(b"=");
            hasher.update(v.as_bytes());
            hasher.update(b"\n");
        }
        let digest = hasher.finalize();
        let mut out = String::with_capacity(64);
        for b in digest {
            let _ = write!(out, "{b:02x}");
        }
        out
    }

    /// Number of frames per second of audio.
    pub fn frame_rate(&self) -> f64 {
        self.sample_rate as f64 / self.hop_length as f64
    }

    /// Duration of one hop in seconds (frames -> seconds conversion).
    pub fn frame_shift_secs(&self) -> f64 {
        self.hop_length as f64 / self.sample_rate as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_overrides_and_comments() {
        let cfg = Config::from_str_contents(
            "# comment\nd_model = 64\nalpha = 0.5 # inline\nvq_ema = true\nnorm_scope = speaker\n",
        )
        .unwrap();
        assert_eq!(cfg.d_model, 64);
        assert_eq!(cfg.alpha, 0.5);
        assert!(cfg.vq_ema);
        assert_eq!(cfg.norm_scope, NormScope::Speaker);
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(Config::from_str_contents("no_such_key = 1\n").is_err());
    }

    #[test]
    fn hash_stable_under_reordering() {
        let a = Config::from_str_contents("d_model = 64\nseed = 7\n").unwrap();
        let b = Config::from_str_contents("seed = 7\nd_model = 64\n").unwrap();
        assert_eq!(a.hash(), b.hash());
        let c = Config::from_str_contents("seed = 8\nd_model = 64\n").unwrap();
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn frame_rate_matches_hop() {
        let cfg = Config::default();
        assert!((cfg.frame_rate() - 16_000.0 / 240.0).abs() < 1e-12);
        assert!((cfg.frame_shift_secs() - 0.015).abs() < 1e-15);
    }
}
