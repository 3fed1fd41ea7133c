//! Two-path acoustic model.
//!
//! The phoneme path (encoder, length regulator, decoder) carries
//! pronunciation only: pitch and energy never touch it. The style path fuses
//! the utterance text embedding with predicted or teacher-forced pitch and
//! energy, expands to frame level, attends over the context window and
//! produces H_sd, which is injected into every decoder FFT block and pulled
//! toward the frozen VQ-VAE codes by the style distillation loss.

use std::path::Path;

use ndarray::{Array2, ArrayD};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::config::{Ablation, Config};
use crate::error::{Error, Result};
use crate::nn::layers::{
    pos_encoding, Conv1d, Embedding, FftBlock, Fwd, InstanceNorm1d, Linear, MultiHeadAttention,
    VariancePredictor,
};
use crate::nn::params::ParamStore;
use crate::nn::tape::{NodeId, Tape};
use rand::SeedableRng;

pub const COMPONENT: &str = "acoustic";

/// Expand `h` row-wise by per-phoneme durations (value-level length
/// regulator; the in-graph version is `Tape::repeat_rows`).
pub fn length_regulate(h: &Array2<f64>, durations: &[u32]) -> Result<Array2<f64>> {
    if h.nrows() != durations.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} rows vs {} durations",
            h.nrows(),
            durations.len()
        )));
    }
    let total: usize = durations.iter().map(|&d| d as usize).sum();
    if total == 0 {
        return Err(Error::EmptyExpansion);
    }
    let mut out = Array2::<f64>::zeros((total, h.ncols()));
    let mut t = 0;
    for (i, &d) in durations.iter().enumerate() {
        for _ in 0..d {
            out.row_mut(t).assign(&h.row(i));
            t += 1;
        }
    }
    Ok(out)
}

/// Inference-time duration rounding: round-half-up of `exp(pred) - 1`,
/// clamped to at least one frame per phoneme.
pub fn durations_from_log_preds(log_preds: &[f64]) -> Vec<u32> {
    log_preds.iter().map(|&p| ((p.exp() - 1.0).round().max(1.0)) as u32).collect()
}

enum AdaptMode<'a> {
    /// Teacher forcing: ground-truth durations, pitch and energy.
    Train(&'a Targets),
    /// Free running: every track predicted.
    Infer,
    /// Forced durations with predicted pitch/energy (frame-aligned eval).
    ForcedDurations(&'a [u32]),
}

struct StyleDecoder {
    cross: MultiHeadAttention,
    convs: Vec<(Conv1d, InstanceNorm1d)>,
    out: Conv1d,
}

impl StyleDecoder {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &Config) -> StyleDecoder {
        let d = cfg.d_style;
        let cross = MultiHeadAttention::new(store, rng, "style_decoder.cross", d, cfg.n_heads);
        let convs = (0..cfg.style_decoder_layers.saturating_sub(1))
            .map(|i| {
                (
                    Conv1d::new(
                        store,
                        rng,
                        &format!("style_decoder.conv{i}"),
                        d,
                        d,
                        cfg.style_decoder_kernel,
                    ),
                    InstanceNorm1d::new(store, &format!("style_decoder.norm{i}"), d),
                )
            })
            .collect();
        // Final layer is a plain convolution: H_sd regresses signed codes.
        let out = Conv1d::new(store, rng, "style_decoder.out", d, d, cfg.style_decoder_kernel);
        StyleDecoder { cross, convs, out }
    }

    fn forward(&self, f: &mut Fwd, h_s_frame: NodeId, h_cs: NodeId) -> (NodeId, Vec<NodeId>) {
        let (attn_out, weights) = self.cross.forward_with_attn(f, h_s_frame, h_cs);
        let mut x = f.tape.add(h_s_frame, attn_out);
        for (conv, norm) in &self.convs {
            x = conv.forward(f, x);
            x = norm.forward(f, x);
            x = f.tape.relu(x);
        }
        (self.out.forward(f, x), weights)
    }
}

/// Ground-truth targets used for teacher forcing during training.
pub struct Targets {
    pub durations: Vec<u32>,
    /// Phoneme-level normalized pitch.
    pub pitch: Vec<f64>,
    /// Phoneme-level normalized energy.
    pub energy: Vec<f64>,
}

/// One training item with everything the forward pass consumes.
pub struct TtsItem {
    pub phoneme_ids: Vec<usize>,
    pub targets: Targets,
    /// Reference mel, `T x n_mels`.
    pub mel: Array2<f64>,
    /// Utterance text style embedding, `1 x d_style`.
    pub h_s: Array2<f64>,
    /// Context window embeddings, `(2k+1) x d_style`.
    pub h_cs: Array2<f64>,
    /// Frozen extractor codes, `T x d_style`; absent under the
    /// no-style-extractor ablation.
    pub h_se: Option<Array2<f64>>,
}

pub struct LossNodes {
    pub mel: NodeId,
    pub dur: NodeId,
    pub pitch: NodeId,
    pub energy: NodeId,
    pub style: Option<NodeId>,
    pub l_tts: NodeId,
    pub total: NodeId,
}

#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct LossValues {
    pub mel: f64,
    pub dur: f64,
    pub pitch: f64,
    pub energy: f64,
    pub style: f64,
    pub l_tts: f64,
    pub total: f64,
}

pub struct TrainGraph {
    pub tape: Tape,
    pub losses: LossNodes,
    pub h_p_frame: NodeId,
    pub h_s_frame: Option<NodeId>,
    pub h_sd: Option<NodeId>,
}

impl TrainGraph {
    pub fn values(&self) -> LossValues {
        LossValues {
            mel: self.tape.scalar(self.losses.mel),
            dur: self.tape.scalar(self.losses.dur),
            pitch: self.tape.scalar(self.losses.pitch),
            energy: self.tape.scalar(self.losses.energy),
            style: self.losses.style.map(|n| self.tape.scalar(n)).unwrap_or(0.0),
            l_tts: self.tape.scalar(self.losses.l_tts),
            total: self.tape.scalar(self.losses.total),
        }
    }
}

pub struct InferenceOut {
    pub mel: Array2<f64>,
    pub durations: Vec<u32>,
    /// Phoneme-level normalized pitch/energy predictions.
    pub pitch: Vec<f64>,
    pub energy: Vec<f64>,
}

pub struct AcousticModel {
    pub store: ParamStore,
    pub cfg: Config,
    pub ablation: Ablation,
    pub phoneme_inventory: Vec<String>,
    pub frozen: bool,
    phon_embed: Embedding,
    enc_blocks: Vec<FftBlock>,
    style_proj: Linear,
    dur_pred: VariancePredictor,
    pitch_pred: VariancePredictor,
    energy_pred: VariancePredictor,
    pitch_embed: Conv1d,
    energy_embed: Conv1d,
    style_dec: Option<StyleDecoder>,
    dec_blocks: Vec<FftBlock>,
    style_inject: Vec<Linear>,
    mel_out: Linear,
}

impl AcousticModel {
    pub fn new(
        cfg: &Config,
        ablation: Ablation,
        phoneme_inventory: Vec<String>,
        seed: u64,
    ) -> Result<AcousticModel> {
        if ablation == Ablation::NoStyleDecoder && cfg.d_style != cfg.d_model {
            return Err(Error::Config(
                "no_style_decoder feeds H_s' into the phoneme decoder and needs d_style == d_model"
                    .into(),
            ));
        }
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.d_model;
        let phon_embed = Embedding::new(
            &mut store,
            &mut rng,
            "phoneme_encoder.embed",
            phoneme_inventory.len().max(1),
            d,
        );
        let enc_blocks = (0..cfg.encoder_blocks)
            .map(|i| {
                FftBlock::new(
                    &mut store,
                    &mut rng,
                    &format!("phoneme_encoder.block{i}"),
                    d,
                    cfg.n_heads,
                    cfg.ffn_hidden,
                    cfg.conv_kernel,
                )
            })
            .collect();
        let style_proj =
            Linear::new(&mut store, &mut rng, "variance_adaptor.style_proj", cfg.d_style, d);
        let dur_pred =
            VariancePredictor::new(&mut store, &mut rng, "variance_adaptor.duration", d, cfg.predictor_kernel);
        let pitch_pred =
            VariancePredictor::new(&mut store, &mut rng, "variance_adaptor.pitch", d, cfg.predictor_kernel);
        let energy_pred =
            VariancePredictor::new(&mut store, &mut rng, "variance_adaptor.energy", d, cfg.predictor_kernel);
        let pitch_embed = Conv1d::new(
            &mut store,
            &mut rng,
            "variance_adaptor.pitch_embed",
            1,
            cfg.d_style,
            cfg.embed_kernel,
        );
        let energy_embed = Conv1d::new(
            &mut store,
            &mut rng,
            "variance_adaptor.energy_embed",
            1,
            cfg.d_style,
            cfg.embed_kernel,
        );
        let style_dec = if ablation == Ablation::NoStyleDecoder {
            None
        } else {
            Some(StyleDecoder::new(&mut store, &mut rng, cfg))
        };
        let dec_blocks: Vec<FftBlock> = (0..cfg.decoder_blocks)
            .map(|i| {
                FftBlock::new(
                    &mut store,
                    &mut rng,
                    &format!("mel_decoder.block{i}"),
                    d,
                    cfg.n_heads,
                    cfg.ffn_hidden,
                    cfg.conv_kernel,
                )
            })
            .collect();
        let style_inject = if ablation == Ablation::NoStyleDecoder {
            Vec::new()
        } else {
            (0..cfg.decoder_blocks)
                .map(|i| {
                    Linear::new_zeros(&mut store, &format!("style_injection.block{i}"), cfg.d_style, d)
                })
                .collect()
        };
        let mel_out = Linear::new(&mut store, &mut rng, "mel_decoder.out", d, cfg.n_mels);
        Ok(AcousticModel {
            store,
            cfg: cfg.clone(),
            ablation,
            phoneme_inventory,
            frozen: false,
            phon_embed,
            enc_blocks,
            style_proj,
            dur_pred,
            pitch_pred,
            energy_pred,
            pitch_embed,
            energy_embed,
            style_dec,
            dec_blocks,
            style_inject,
            mel_out,
        })
    }

    pub fn map_phonemes(&self, phonemes: &[String]) -> Result<Vec<usize>> {
        phonemes
            .iter()
            .map(|p| {
                self.phoneme_inventory
                    .iter()
                    .position(|q| q == p)
                    .ok_or_else(|| Error::UnknownPhoneme(p.clone()))
            })
            .collect()
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::EmptyExpansion);
        }
        for &id in ids {
            if id >= self.phoneme_inventory.len() {
                return Err(Error::UnknownPhoneme(format!("#{id}")));
            }
        }
        Ok(())
    }

    /// Phoneme encoder: embedding + positions + FFT stack, `N x d_model`.
    pub fn phoneme_encode(&self, f: &mut Fwd, ids: &[usize]) -> Result<NodeId> {
        self.check_ids(ids)?;
        let x = self.phon_embed.forward(f, ids);
        let pe = pos_encoding(ids.len(), self.cfg.d_model);
        let pe = f.tape.constant(pe.into_dyn());
        let mut x = f.tape.add(x, pe);
        for block in &self.enc_blocks {
            x = block.forward(f, x);
        }
        Ok(x)
    }

    /// Effective style inputs under the current ablation.
    fn effective_style(&self, h_s: &Array2<f64>, h_cs: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        if self.ablation == Ablation::NoStyleEncoder {
            (
                Array2::zeros((1, self.cfg.d_style)),
                Array2::zeros((h_cs.nrows(), self.cfg.d_style)),
            )
        } else {
            (h_s.clone(), h_cs.clone())
        }
    }

    /// Extended variance adaptor. Returns predictor nodes, the regulated
    /// phoneme/style frame sequences, and the durations actually used.
    fn variance_adapt(
        &self,
        f: &mut Fwd,
        h_p: NodeId,
        h_s: &Array2<f64>,
        mode: AdaptMode<'_>,
    ) -> Result<(NodeId, NodeId, NodeId, NodeId, NodeId, Vec<u32>)> {
        let n = f.tape.value(h_p).shape()[0];
        let h_s_node = f.tape.constant(h_s.clone().into_dyn());
        let s_proj = self.style_proj.forward(f, h_s_node);
        let s_rows = f.tape.repeat_rows(s_proj, &[n]);
        let h_ps = f.tape.add(h_p, s_rows);

        let dur = self.dur_pred.forward(f, h_ps);
        let pitch = self.pitch_pred.forward(f, h_ps);
        let energy = self.energy_pred.forward(f, h_ps);

        let (durations, pitch_used, energy_used) = match mode {
            AdaptMode::Train(t) => {
                if t.durations.len() != n || t.pitch.len() != n || t.energy.len() != n {
                    return Err(Error::ShapeMismatch(format!(
                        "targets must be phoneme-level: N={n}, got {}/{}/{}",
                        t.durations.len(),
                        t.pitch.len(),
                        t.energy.len()
                    )));
                }
                let p = f.tape.constant(column(&t.pitch));
                let e = f.tape.constant(column(&t.energy));
                (t.durations.to_vec(), p, e)
            }
            AdaptMode::Infer => {
                let d = durations_from_log_preds(as_column(f.tape.value(dur)).as_slice());
                (d, pitch, energy)
            }
            AdaptMode::ForcedDurations(d) => {
                if d.len() != n {
                    return Err(Error::ShapeMismatch(format!(
                        "{} forced durations for {n} phonemes",
                        d.len()
                    )));
                }
                (d.to_vec(), pitch, energy)
            }
        };
        let total: usize = durations.iter().map(|&d| d as usize).sum();
        if total == 0 {
            return Err(Error::EmptyExpansion);
        }
        let dur_usize: Vec<usize> = durations.iter().map(|&d| d as usize).collect();

        // Style branch: H_s broadcast over phonemes plus pitch/energy
        // embeddings, summed at phoneme level, then length-regulated.
        let h_s_b = f.tape.repeat_rows(h_s_node, &[n]);
        let p_emb = self.pitch_embed.forward(f, pitch_used);
        let e_emb = self.energy_embed.forward(f, energy_used);
        let style_phon = {
            let pe = f.tape.add(p_emb, e_emb);
            f.tape.add(h_s_b, pe)
        };
        let h_s_frame = f.tape.repeat_rows(style_phon, &dur_usize);

        // Phoneme branch: pronunciation only, no pitch or energy.
        let h_p_frame = f.tape.repeat_rows(h_p, &dur_usize);

        Ok((dur, pitch, energy, h_p_frame, h_s_frame, durations))
    }

    /// Style decoder: cross-attention over the context window, residual,
    /// conv stack. Also returns per-head attention weights.
    pub fn style_decode(
        &self,
        f: &mut Fwd,
        h_s_frame: NodeId,
        h_cs: &Array2<f64>,
    ) -> Result<(NodeId, Vec<NodeId>)> {
        let dec = self
            .style_dec
            .as_ref()
            .ok_or_else(|| Error::Config("style decoder removed by ablation".into()))?;
        if h_cs.nrows() % 2 == 0 {
            return Err(Error::BadWindow(h_cs.nrows()));
        }
        let ctx = f.tape.constant(h_cs.clone().into_dyn());
        Ok(dec.forward(f, h_s_frame, ctx))
    }

    /// Mel decoder with per-block style injection. Returns the mel frames
    /// and the final mixed hidden sequence.
    pub fn mel_decode(
        &self,
        f: &mut Fwd,
        h_p_frame: NodeId,
        h_sd: Option<NodeId>,
        h_s_frame_direct: Option<NodeId>,
    ) -> Result<(NodeId, NodeId)> {
        let t = f.tape.value(h_p_frame).shape()[0];
        let pe = pos_encoding(t, self.cfg.d_model);
        let pe = f.tape.constant(pe.into_dyn());
        let mut x = f.tape.add(h_p_frame, pe);
        if let Some(hsf) = h_s_frame_direct {
            // no_style_decoder: both adaptor outputs feed one decoder.
            x = f.tape.add(x, hsf);
        }
        if let Some(h_sd) = h_sd {
            if f.tape.value(h_sd).shape()[0] != t {
                return Err(Error::ShapeMismatch(format!(
                    "H_sd has {} frames, decoder input has {t}",
                    f.tape.value(h_sd).shape()[0]
                )));
            }
        }
        for (b, block) in self.dec_blocks.iter().enumerate() {
            if let Some(h_sd) = h_sd {
                let inj = self.style_inject[b].forward(f, h_sd);
                x = f.tape.add(x, inj);
            }
            x = block.forward(f, x);
        }
        let mel = self.mel_out.forward(f, x);
        Ok((mel, x))
    }

    /// Teacher-forced training pass producing the full loss breakdown.
    pub fn forward_train(&self, item: &TtsItem) -> Result<TrainGraph> {
        let mut tape = Tape::new();
        let mut f = Fwd::new(&mut tape, &self.store);
        let (h_s, h_cs) = self.effective_style(&item.h_s, &item.h_cs);
        let h_p = self.phoneme_encode(&mut f, &item.phoneme_ids)?;
        let (dur, pitch, energy, h_p_frame, h_s_frame, durations) =
            self.variance_adapt(&mut f, h_p, &h_s, AdaptMode::Train(&item.targets))?;
        let t: usize = durations.iter().map(|&d| d as usize).sum();
        if item.mel.nrows() != t {
            return Err(Error::ShapeMismatch(format!(
                "target mel has {} frames but durations sum to {t}",
                item.mel.nrows()
            )));
        }

        let (h_sd, h_s_direct) = match self.ablation {
            Ablation::NoStyleDecoder => (None, Some(h_s_frame)),
            _ => {
                let (h_sd, _) = self.style_decode(&mut f, h_s_frame, &h_cs)?;
                (Some(h_sd), None)
            }
        };
        let (mel_pred, _) = self.mel_decode(&mut f, h_p_frame, h_sd, h_s_direct)?;

        let mel_target = f.tape.constant(item.mel.clone().into_dyn());
        let mel_loss = f.tape.l1(mel_pred, mel_target);
        let dur_target: Vec<f64> =
            item.targets.durations.iter().map(|&d| (d as f64 + 1.0).ln()).collect();
        let dur_t = f.tape.constant(column(&dur_target));
        let dur_loss = f.tape.mse(dur, dur_t);
        let pitch_t = f.tape.constant(column(&item.targets.pitch));
        let pitch_loss = f.tape.mse(pitch, pitch_t);
        let energy_t = f.tape.constant(column(&item.targets.energy));
        let energy_loss = f.tape.mse(energy, energy_t);

        let l_tts = {
            let a = f.tape.add(mel_loss, dur_loss);
            let b = f.tape.add(pitch_loss, energy_loss);
            f.tape.add(a, b)
        };

        let style_loss = match (&h_sd, &item.h_se) {
            (Some(h_sd), Some(h_se)) => {
                if h_se.nrows() != t {
                    return Err(Error::ShapeMismatch(format!(
                        "H_se has {} frames but decoder produced {t}",
                        h_se.nrows()
                    )));
                }
                let target = f.tape.constant(h_se.clone().into_dyn());
                Some(f.tape.mse(*h_sd, target))
            }
            _ => None,
        };
        let total = match style_loss {
            Some(s) => {
                let scaled = f.tape.scale(s, self.cfg.alpha);
                f.tape.add(l_tts, scaled)
            }
            None => {
                // Keep `total` a distinct node with the identical value.
                f.tape.shift(l_tts, 0.0)
            }
        };

        Ok(TrainGraph {
            tape,
            losses: LossNodes {
                mel: mel_loss,
                dur: dur_loss,
                pitch: pitch_loss,
                energy: energy_loss,
                style: style_loss,
                l_tts,
                total,
            },
            h_p_frame,
            h_s_frame: if self.ablation == Ablation::NoStyleDecoder { None } else { Some(h_s_frame) },
            h_sd,
        })
    }

    /// Free-running synthesis pass: predicted durations, pitch and energy;
    /// the style extractor is never consulted.
    pub fn forward_infer(
        &self,
        phoneme_ids: &[usize],
        h_s: &Array2<f64>,
        h_cs: &Array2<f64>,
    ) -> Result<InferenceOut> {
        let mut tape = Tape::new();
        let mut f = Fwd::frozen(&mut tape, &self.store);
        let (h_s, h_cs) = self.effective_style(h_s, h_cs);
        let h_p = self.phoneme_encode(&mut f, phoneme_ids)?;
        let (_dur, pitch, energy, h_p_frame, h_s_frame, durations) =
            self.variance_adapt(&mut f, h_p, &h_s, AdaptMode::Infer)?;
        let (h_sd, h_s_direct) = match self.ablation {
            Ablation::NoStyleDecoder => (None, Some(h_s_frame)),
            _ => {
                let (h_sd, _) = self.style_decode(&mut f, h_s_frame, &h_cs)?;
                (Some(h_sd), None)
            }
        };
        let (mel, _) = self.mel_decode(&mut f, h_p_frame, h_sd, h_s_direct)?;
        Ok(InferenceOut {
            mel: to2(tape.value(mel)),
            durations,
            pitch: as_column(tape.value(pitch)),
            energy: as_column(tape.value(energy)),
        })
    }

    /// Frame-aligned evaluation pass: ground-truth durations drive the
    /// length regulator while pitch and energy stay free-running, so the
    /// output is comparable frame by frame against the reference.
    pub fn forward_eval(
        &self,
        phoneme_ids: &[usize],
        h_s: &Array2<f64>,
        h_cs: &Array2<f64>,
        durations: &[u32],
    ) -> Result<InferenceOut> {
        let mut tape = Tape::new();
        let mut f = Fwd::frozen(&mut tape, &self.store);
        let (h_s, h_cs) = self.effective_style(h_s, h_cs);
        let h_p = self.phoneme_encode(&mut f, phoneme_ids)?;
        let (_dur, pitch, energy, h_p_frame, h_s_frame, used) =
            self.variance_adapt(&mut f, h_p, &h_s, AdaptMode::ForcedDurations(durations))?;
        let (h_sd, h_s_direct) = match self.ablation {
            Ablation::NoStyleDecoder => (None, Some(h_s_frame)),
            _ => {
                let (h_sd, _) = self.style_decode(&mut f, h_s_frame, &h_cs)?;
                (Some(h_sd), None)
            }
        };
        let (mel, _) = self.mel_decode(&mut f, h_p_frame, h_sd, h_s_direct)?;
        Ok(InferenceOut {
            mel: to2(tape.value(mel)),
            durations: used,
            pitch: as_column(tape.value(pitch)),
            energy: as_column(tape.value(energy)),
        })
    }

    pub fn checksum(&self) -> String {
        self.store.checksum()
    }

    pub fn parameter_groups(&self) -> Vec<String> {
        self.store.group_names()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let extra = serde_json::json!({
            "phoneme_inventory": self.phoneme_inventory,
            "ablation": self.ablation,
            "frozen": self.frozen,
        });
        checkpoint::save(path, COMPONENT, &self.cfg, &self.store, extra, None)
    }

    pub fn load(path: &Path) -> Result<AcousticModel> {
        let ck = checkpoint::load(path)?;
        ck.expect_component(COMPONENT)?;
        let inventory: Vec<String> = serde_json::from_value(ck.extra["phoneme_inventory"].clone())?;
        let ablation: Ablation = serde_json::from_value(ck.extra["ablation"].clone())?;
        let mut model = AcousticModel::new(&ck.config, ablation, inventory, 0)?;
        ck.apply_to(&mut model.store)?;
        model.frozen = ck.extra["frozen"].as_bool().unwrap_or(false);
        Ok(model)
    }
}

fn column(v: &[f64]) -> ArrayD<f64> {
    ArrayD::from_shape_vec(ndarray::IxDyn(&[v.len(), 1]), v.to_vec()).expect("column")
}

fn as_column(v: &ArrayD<f64>) -> Vec<f64> {
    v.iter().copied().collect()
}

fn to2(v: &ArrayD<f64>) -> Array2<f64> {
    v.view().into_dimensionality::<ndarray::Ix2>().expect("2-d").to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny_cfg() -> Config {
        let mut cfg = Config::default();
        cfg.d_model = 16;
        cfg.d_style = 16;
        cfg.n_heads = 2;
        cfg.encoder_blocks = 1;
        cfg.decoder_blocks = 2;
        cfg.conv_kernel = 3;
        cfg.ffn_hidden = 24;
        cfg.style_decoder_layers = 2;
        cfg.style_decoder_kernel = 3;
        cfg.n_mels = 8;
        cfg.context_k = 1;
        cfg
    }

    fn inventory() -> Vec<String> {
        ["a", "b", "c", "d"].iter().map(|s| s.to_string()).collect()
    }

    fn model(cfg: &Config, ablation: Ablation) -> AcousticModel {
        AcousticModel::new(cfg, ablation, inventory(), 11).unwrap()
    }

    fn rand2(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-0.5..0.5))
    }

    fn item(cfg: &Config, rng: &mut ChaCha8Rng) -> TtsItem {
        let durations = vec![2u32, 1, 3];
        let t = 6;
        TtsItem {
            phoneme_ids: vec![0, 2, 3],
            targets: Targets {
                durations,
                pitch: vec![0.3, -0.2, 0.8],
                energy: vec![0.5, 0.1, -0.4],
            },
            mel: rand2(rng, t, cfg.n_mels),
            h_s: rand2(rng, 1, cfg.d_style),
            h_cs: rand2(rng, 3, cfg.d_style),
            h_se: Some(rand2(rng, t, cfg.d_style)),
        }
    }

    #[test]
    fn length_regulate_definitional() {
        let h = ndarray::arr2(&[[1.0, 10.0], [2.0, 20.0], [3.0, 30.0]]);
        let out = length_regulate(&h, &[2, 1, 3]).unwrap();
        assert_eq!(out.nrows(), 6);
        assert_eq!(out.row(0), h.row(0));
        assert_eq!(out.row(1), h.row(0));
        assert_eq!(out.row(2), h.row(1));
        assert_eq!(out.row(5), h.row(2));
        // Identity and zero-duration skip.
        assert_eq!(length_regulate(&h, &[1, 1, 1]).unwrap(), h);
        let skipped = length_regulate(&h, &[0, 4, 0]).unwrap();
        assert_eq!(skipped.nrows(), 4);
        for i in 0..4 {
            assert_eq!(skipped.row(i), h.row(1));
        }
        assert!(matches!(length_regulate(&h, &[0, 0, 0]), Err(Error::EmptyExpansion)));
    }

    #[test]
    fn phoneme_encoder_contracts() {
        let cfg = tiny_cfg();
        let m = model(&cfg, Ablation::None);
        let mut tape = Tape::new();
        let mut f = Fwd::frozen(&mut tape, &m.store);
        let one = m.phoneme_encode(&mut f, &[1]).unwrap();
        assert_eq!(tape.value(one).shape(), &[1, cfg.d_model]);
        // Determinism.
        let mut t2 = Tape::new();
        let a = m.phoneme_encode(&mut Fwd::frozen(&mut t2, &m.store), &[0, 1, 2]).unwrap();
        let mut t3 = Tape::new();
        let b = m.phoneme_encode(&mut Fwd::frozen(&mut t3, &m.store), &[0, 1, 2]).unwrap();
        assert_eq!(t2.value(a), t3.value(b));
        // Positional encoding: permuting phonemes changes the output.
        let mut t4 = Tape::new();
        let c = m.phoneme_encode(&mut Fwd::frozen(&mut t4, &m.store), &[2, 1, 0]).unwrap();
        assert_ne!(t2.value(a), t4.value(c));
        assert!(matches!(m.map_phonemes(&["zz".into()]), Err(Error::UnknownPhoneme(_))));
    }

    #[test]
    fn variance_adaptor_paths() {
        let cfg = tiny_cfg();
        let m = model(&cfg, Ablation::None);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let it = item(&cfg, &mut rng);

        let g = m.forward_train(&it).unwrap();
        assert_eq!(g.tape.value(g.h_p_frame).shape(), &[6, cfg.d_model]);

        // Perturbing teacher pitch changes H_s_frame but not H_p_frame.
        let mut it2 = TtsItem { ..it };
        it2.targets.pitch[1] += 0.7;
        let g2 = m.forward_train(&it2).unwrap();
        assert_eq!(g.tape.value(g.h_p_frame), g2.tape.value(g2.h_p_frame));
        assert_ne!(
            g.tape.value(g.h_s_frame.unwrap()),
            g2.tape.value(g2.h_s_frame.unwrap())
        );

        // Zeroing H_s moves the predictors (style reaches them through H_ps).
        let mut it3 = item(&cfg, &mut rng);
        it3.h_se = None;
        let g3 = m.forward_train(&it3).unwrap();
        let mut it4 = TtsItem { h_s: Array2::zeros((1, cfg.d_style)), ..it3 };
        it4.h_se = None;
        let g4 = m.forward_train(&it4).unwrap();
        assert_ne!(g3.tape.value(g3.losses.dur), g4.tape.value(g4.losses.dur));

        // Training without targets is an error.
        let h_s = rand2(&mut rng, 1, cfg.d_style);
        let mut tape = Tape::new();
        let mut f = Fwd::new(&mut tape, &m.store);
        let h_p = m.phoneme_encode(&mut f, &[0, 1]).unwrap();
        let err = m
            .forward_train(&TtsItem {
                phoneme_ids: vec![0, 1],
                targets: Targets { durations: vec![], pitch: vec![], energy: vec![] },
                mel: rand2(&mut rng, 1, cfg.n_mels),
                h_s,
                h_cs: rand2(&mut rng, 3, cfg.d_style),
                h_se: None,
            })
            .err()
            .unwrap();
        assert!(matches!(err, Error::ShapeMismatch(_) | Error::MissingTargets));
    }

    #[test]
    fn style_decoder_attention_rows_sum_to_one() {
        let cfg = tiny_cfg();
        let m = model(&cfg, Ablation::None);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for t in [1usize, 5] {
            let mut tape = Tape::new();
            let mut f = Fwd::frozen(&mut tape, &m.store);
            let hsf = f.tape.constant(rand2(&mut rng, t, cfg.d_style).into_dyn());
            let h_cs = rand2(&mut rng, 3, cfg.d_style);
            let (h_sd, attns) = m.style_decode(&mut f, hsf, &h_cs).unwrap();
            assert_eq!(tape.value(h_sd).shape(), &[t, cfg.d_style]);
            for attn in attns {
                let a = tape.value(attn);
                let a2 = a.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                assert_eq!(a2.ncols(), 3);
                for row in a2.rows() {
                    assert!((row.sum() - 1.0).abs() < 1e-12);
                }
            }
        }
        // Degenerate single-slot zero context still produces T frames.
        let mut tape = Tape::new();
        let mut f = Fwd::frozen(&mut tape, &m.store);
        let hsf = f.tape.constant(rand2(&mut rng, 4, cfg.d_style).into_dyn());
        let (h_sd, _) = m.style_decode(&mut f, hsf, &Array2::zeros((1, cfg.d_style))).unwrap();
        assert_eq!(tape.value(h_sd).shape(), &[4, cfg.d_style]);
    }

    #[test]
    fn injection_is_noop_at_init_and_gradient_flows() {
        let cfg = tiny_cfg();
        let m = model(&cfg, Ablation::None);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let hpf_v = rand2(&mut rng, 5, cfg.d_model);
        // Zero-initialized injections: any H_sd yields the plain decoder output.
        let run = |h_sd_v: Array2<f64>| {
            let mut tape = Tape::new();
            let mut f = Fwd::frozen(&mut tape, &m.store);
            let hpf = f.tape.constant(hpf_v.clone().into_dyn());
            let hsd = f.tape.constant(h_sd_v.into_dyn());
            let (mel, _) = m.mel_decode(&mut f, hpf, Some(hsd), None).unwrap();
            tape.value(mel).clone()
        };
        let zero = run(Array2::zeros((5, cfg.d_style)));
        let random = run(rand2(&mut rng, 5, cfg.d_style));
        assert_eq!(zero, random, "zero-init injections must start as a no-op");
        assert_eq!(zero.shape(), &[5, cfg.n_mels]);

        // Style loss still reaches H_sd at init.
        let it = item(&cfg, &mut rng);
        let g = m.forward_train(&it).unwrap();
        let mut grads = crate::nn::params::GradStore::new(&m.store);
        let node_grads = g.tape.backward(g.losses.total, &mut grads);
        let gh = node_grads.get(g.h_sd.unwrap()).expect("H_sd gets gradient");
        assert!(gh.iter().any(|&x| x != 0.0));
        // And the injection projections receive gradient, so training wakes
        // them up.
        let inj = m.store.id("style_injection.block0.w").unwrap();
        assert!(grads.get(inj).is_some());
    }

    #[test]
    fn loss_algebra_exact() {
        let mut cfg = tiny_cfg();
        let m = model(&cfg, Ablation::None);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let it = item(&cfg, &mut rng);
        let g = m.forward_train(&it).unwrap();
        let v = g.values();
        assert_eq!(v.total, v.l_tts + cfg.alpha * v.style, "total must be exact");
        assert!(v.mel > 0.0 && v.dur > 0.0 && v.pitch >= 0.0 && v.energy >= 0.0 && v.style >= 0.0);

        // alpha = 0 reproduces L_tts bit-for-bit.
        cfg.alpha = 0.0;
        let m0 = model(&cfg, Ablation::None);
        let g0 = m0.forward_train(&it).unwrap();
        let v0 = g0.values();
        assert_eq!(v0.total, v0.l_tts);

        // H_sd == H_se gives zero style loss.
        let mut it2 = item(&cfg, &mut rng);
        let pre = m.forward_train(&it2).unwrap();
        let h_sd_val = to2(pre.tape.value(pre.h_sd.unwrap()));
        it2.h_se = Some(h_sd_val);
        let g2 = m.forward_train(&it2).unwrap();
        assert_eq!(g2.values().style, 0.0);

        // Doubling every element of (H_sd - H_se) quadruples L_style.
        let mut it3 = item(&cfg, &mut rng);
        let pre3 = m.forward_train(&it3).unwrap();
        let h_sd_val = to2(pre3.tape.value(pre3.h_sd.unwrap()));
        let delta = rand2(&mut rng, h_sd_val.nrows(), h_sd_val.ncols());
        it3.h_se = Some(&h_sd_val - &delta);
        let s1 = m.forward_train(&it3).unwrap().values().style;
        it3.h_se = Some(&h_sd_val - &(&delta * 2.0));
        let s2 = m.forward_train(&it3).unwrap().values().style;
        assert!((s2 / s1 - 4.0).abs() < 1e-9);
    }

    #[test]
    fn inference_duration_consistency_and_determinism() {
        let cfg = tiny_cfg();
        let m = model(&cfg, Ablation::None);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let h_s = rand2(&mut rng, 1, cfg.d_style);
        let h_cs = rand2(&mut rng, 3, cfg.d_style);
        let out = m.forward_infer(&[0, 1, 2, 3], &h_s, &h_cs).unwrap();
        let total: u32 = out.durations.iter().sum();
        assert_eq!(out.mel.nrows(), total as usize);
        assert!(out.durations.iter().all(|&d| d >= 1));
        let again = m.forward_infer(&[0, 1, 2, 3], &h_s, &h_cs).unwrap();
        assert_eq!(out.mel, again.mel);
        // Null context still synthesizes.
        let nulls = Array2::zeros((5, cfg.d_style));
        let ok = m.forward_infer(&[1, 2], &h_s, &nulls).unwrap();
        assert!(ok.mel.nrows() >= 2);
    }

    #[test]
    fn ablation_parameter_inventories() {
        let cfg = tiny_cfg();
        let base = model(&cfg, Ablation::None);
        let no_enc = model(&cfg, Ablation::NoStyleEncoder);
        let no_dec = model(&cfg, Ablation::NoStyleDecoder);
        let no_ext = model(&cfg, Ablation::NoStyleExtractor);
        assert_eq!(base.store.param_names(), no_enc.store.param_names());
        assert_eq!(base.store.param_names(), no_ext.store.param_names());
        let dec_names = no_dec.store.param_names();
        assert!(dec_names.iter().all(|n| !n.starts_with("style_decoder.")));
        assert!(dec_names.iter().all(|n| !n.starts_with("style_injection.")));
        assert!(base.store.param_names().iter().any(|n| n.starts_with("style_decoder.")));
        let removed: Vec<_> = base
            .store
            .param_names()
            .into_iter()
            .filter(|n| !dec_names.contains(n))
            .collect();
        assert!(removed
            .iter()
            .all(|n| n.starts_with("style_decoder.") || n.starts_with("style_injection.")));

        // no_style_encoder zeroes the style inputs end to end.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut it = item(&cfg, &mut rng);
        it.h_se = None;
        let a = no_enc.forward_train(&it).unwrap();
        let mut it_zero = TtsItem {
            h_s: rand2(&mut rng, 1, cfg.d_style),
            h_cs: rand2(&mut rng, 3, cfg.d_style),
            ..it
        };
        it_zero.h_se = None;
        let b = no_enc.forward_train(&it_zero).unwrap();
        assert_eq!(a.values().total, b.values().total, "style inputs must be ignored");
    }

    #[test]
    fn no_style_decoder_trains_single_decoder() {
        let cfg = tiny_cfg();
        let m = model(&cfg, Ablation::NoStyleDecoder);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut it = item(&cfg, &mut rng);
        it.h_se = None;
        let g = m.forward_train(&it).unwrap();
        assert!(g.losses.style.is_none());
        let v = g.values();
        assert_eq!(v.total, v.l_tts);
        assert!(g.h_sd.is_none());
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = tiny_cfg();
        let m = model(&cfg, Ablation::None);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tts.bvck");
        m.save(&path).unwrap();
        let back = AcousticModel::load(&path).unwrap();
        assert_eq!(m.checksum(), back.checksum());
        assert_eq!(back.phoneme_inventory, m.phoneme_inventory);
    }
}
