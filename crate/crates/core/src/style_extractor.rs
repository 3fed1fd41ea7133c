//! Self-supervised VQ-VAE style extractor.
//!
//! Encodes the low-band Mel20 plus frame pitch/energy and the utterance text
//! embedding into frame-level discrete style codes. The encoder keeps the
//! time axis at stride 1 (frequency is halved twice), so the quantized
//! latent H_se aligns frame-for-frame with the style decoder output it
//! later supervises. Speaker identity conditions the decoder only.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array2, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::audio::features::AcousticFeatures;
use crate::checkpoint;
use crate::config::Config;
use crate::corpus::{cache_path, read_feature_record, FeatureStats, Manifest, Split};
use crate::error::{Error, Result};
use crate::nn::layers::{Conv2d, Fwd, InstanceNorm2d, Linear};
use crate::nn::optim::Adam;
use crate::nn::params::{self, GradStore, ParamId, ParamStore};
use crate::nn::tape::{NodeId, Tape};
use crate::par;
use crate::text_style::TextStyleModel;

pub const COMPONENT: &str = "style_extractor";

/// Global count of `extract_style` invocations; synthesis asserts this
/// stays untouched ("the style extractor is abandoned" at inference).
pub static EXTRACT_CALLS: AtomicU64 = AtomicU64::new(0);

/// Nearest codeword per row by squared L2; ties break to the lowest index.
pub fn nearest_codewords(z: &Array2<f64>, codebook: &Array2<f64>) -> Vec<usize> {
    par::par_map_range(z.nrows(), |t| nearest_one(&z.row(t), codebook))
}

/// Sequential reference scan (kept for the benches).
pub fn nearest_codewords_seq(z: &Array2<f64>, codebook: &Array2<f64>) -> Vec<usize> {
    (0..z.nrows()).map(|t| nearest_one(&z.row(t), codebook)).collect()
}

fn nearest_one(row: &ndarray::ArrayView1<f64>, codebook: &Array2<f64>) -> usize {
    let mut best = (f64::INFINITY, 0usize);
    for (j, cw) in codebook.rows().into_iter().enumerate() {
        let mut d2 = 0.0;
        for (a, b) in row.iter().zip(cw.iter()) {
            let d = a - b;
            d2 += d * d;
        }
        if d2 < best.0 {
            best = (d2, j);
        }
    }
    best.1
}

/// Value-level quantization: codeword rows plus their indices.
pub fn quantize(codebook: &Array2<f64>, z: &Array2<f64>) -> (Array2<f64>, Vec<usize>) {
    let indices = nearest_codewords(z, codebook);
    let mut z_q = Array2::<f64>::zeros((z.nrows(), z.ncols()));
    for (t, &j) in indices.iter().enumerate() {
        z_q.row_mut(t).assign(&codebook.row(j));
    }
    (z_q, indices)
}

struct ResBlock2d {
    conv_a: Conv2d,
    norm_a: InstanceNorm2d,
    conv_b: Conv2d,
    norm_b: InstanceNorm2d,
}

impl ResBlock2d {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, ch: usize, k: usize) -> Self {
        ResBlock2d {
            conv_a: Conv2d::new(store, rng, &format!("{name}.conv_a"), ch, ch, k, (1, 1)),
            norm_a: InstanceNorm2d::new(store, &format!("{name}.norm_a"), ch),
            conv_b: Conv2d::new(store, rng, &format!("{name}.conv_b"), ch, ch, k, (1, 1)),
            norm_b: InstanceNorm2d::new(store, &format!("{name}.norm_b"), ch),
        }
    }

    fn forward(&self, f: &mut Fwd, x: NodeId) -> NodeId {
        let h = self.conv_a.forward(f, x);
        let h = self.norm_a.forward(f, h);
        let h = f.tape.relu(h);
        let h = self.conv_b.forward(f, h);
        let h = self.norm_b.forward(f, h);
        let s = f.tape.add(x, h);
        f.tape.relu(s)
    }
}

pub struct StyleExtractorModel {
    pub store: ParamStore,
    pub cfg: Config,
    pub speakers: Vec<String>,
    pub frozen: bool,
    pub usage_counts: Vec<u64>,
    enc_conv1: Conv2d,
    enc_norm1: InstanceNorm2d,
    enc_conv2: Conv2d,
    enc_norm2: InstanceNorm2d,
    cond_f0: Linear,
    cond_energy: Linear,
    cond_text: Linear,
    enc_res: Vec<ResBlock2d>,
    to_latent: Linear,
    codebook: ParamId,
    from_latent: Linear,
    spk_table: ParamId,
    spk_proj: Linear,
    dec_res: Vec<ResBlock2d>,
    dec_conv1: Conv2d,
    dec_norm1: InstanceNorm2d,
    dec_conv2: Conv2d,
}

/// Frequency width of the latent map: 20 mel bins halved twice.
fn latent_width() -> usize {
    crate::audio::features::MEL20_BINS.div_ceil(2).div_ceil(2)
}

impl StyleExtractorModel {
    pub fn new(cfg: &Config, speakers: Vec<String>, seed: u64) -> StyleExtractorModel {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c1, c2, k) = (cfg.vq_channels1, cfg.vq_channels2, cfg.vq_kernel);
        let wf = latent_width();

        let enc_conv1 = Conv2d::new(&mut store, &mut rng, "encoder.conv1", 1, c1, k, (1, 2));
        let enc_norm1 = InstanceNorm2d::new(&mut store, "encoder.norm1", c1);
        let cond_f0 = Linear::new(&mut store, &mut rng, "encoder.cond_f0", 1, c1);
        let cond_energy = Linear::new(&mut store, &mut rng, "encoder.cond_energy", 1, c1);
        let cond_text = Linear::new(&mut store, &mut rng, "encoder.cond_text", cfg.d_style, c1);
        let enc_conv2 = Conv2d::new(&mut store, &mut rng, "encoder.conv2", c1, c2, k, (1, 2));
        let enc_norm2 = InstanceNorm2d::new(&mut store, "encoder.norm2", c2);
        let enc_res = (0..cfg.vq_resblocks)
            .map(|i| ResBlock2d::new(&mut store, &mut rng, &format!("encoder.res{i}"), c2, k))
            .collect();
        let to_latent = Linear::new(&mut store, &mut rng, "encoder.to_latent", c2 * wf, cfg.d_style);

        let codebook = store.add(
            "quantizer.codebook",
            params::uniform(
                &mut rng,
                &[cfg.codebook_size, cfg.d_style],
                -1.0 / cfg.codebook_size as f64,
                1.0 / cfg.codebook_size as f64,
            ),
        );

        let from_latent = Linear::new(&mut store, &mut rng, "decoder.from_latent", cfg.d_style, c2 * wf);
        let spk_table = store.add(
            "decoder.speaker_table",
            params::normal(&mut rng, &[speakers.len().max(1), cfg.speaker_dim], 0.02),
        );
        let spk_proj = Linear::new(&mut store, &mut rng, "decoder.spk_proj", cfg.speaker_dim, c2);
        let dec_res = (0..cfg.vq_resblocks)
            .map(|i| ResBlock2d::new(&mut store, &mut rng, &format!("decoder.res{i}"), c2, k))
            .collect();
        let dec_conv1 = Conv2d::new(&mut store, &mut rng, "decoder.conv1", c2, c1, k, (1, 1));
        let dec_norm1 = InstanceNorm2d::new(&mut store, "decoder.norm1", c1);
        let dec_conv2 = Conv2d::new(&mut store, &mut rng, "decoder.conv2", c1, 1, k, (1, 1));

        StyleExtractorModel {
            store,
            cfg: cfg.clone(),
            speakers,
            frozen: false,
            usage_counts: vec![0; cfg.codebook_size],
            enc_conv1,
            enc_norm1,
            enc_conv2,
            enc_norm2,
            cond_f0,
            cond_energy,
            cond_text,
            enc_res,
            to_latent,
            codebook,
            from_latent,
            spk_table,
            spk_proj,
            dec_res,
            dec_conv1,
            dec_norm1,
            dec_conv2,
        }
    }

    fn check_shapes(&self, mel20: &Array2<f64>, f0: &[f64], energy: &[f64]) -> Result<usize> {
        let t = mel20.nrows();
        if mel20.ncols() != crate::audio::features::MEL20_BINS {
            return Err(Error::ShapeMismatch(format!("mel20 has {} bins", mel20.ncols())));
        }
        if f0.len() != t || energy.len() != t {
            return Err(Error::ShapeMismatch(format!(
                "frame counts differ: mel20 {t}, f0 {}, energy {}",
                f0.len(),
                energy.len()
            )));
        }
        Ok(t)
    }

    /// Encoder to the pre-quantization latent `z` (`T x d_style`).
    fn encode_nodes(
        &self,
        f: &mut Fwd,
        mel20: &Array2<f64>,
        f0_norm: &[f64],
        energy_norm: &[f64],
        text_style: &Array2<f64>,
    ) -> NodeId {
        let t = mel20.nrows();
        let mel_node = f.tape.constant(mel20.clone().into_dyn());
        let x = f.tape.map_from_frames(mel_node, 1, crate::audio::features::MEL20_BINS);
        let x = self.enc_conv1.forward(f, x);
        let x = self.enc_norm1.forward(f, x);
        let mut x = f.tape.relu(x);

        // Conditioning joins after the first conv block: frame tracks are
        // projected to the block's channels and broadcast over frequency;
        // the utterance text embedding is broadcast over time as well.
        let f0_col = f.tape.constant(col(f0_norm));
        let f0_proj = self.cond_f0.forward(f, f0_col);
        x = f.tape.add_time_channel(x, f0_proj);
        let en_col = f.tape.constant(col(energy_norm));
        let en_proj = self.cond_energy.forward(f, en_col);
        x = f.tape.add_time_channel(x, en_proj);
        let text_node = f.tape.constant(text_style.clone().into_dyn());
        let text_proj = self.cond_text.forward(f, text_node);
        x = f.tape.add_channel_bias(x, text_proj);

        let x = self.enc_conv2.forward(f, x);
        let x = self.enc_norm2.forward(f, x);
        let mut x = f.tape.relu(x);
        for res in &self.enc_res {
            x = res.forward(f, x);
        }
        let frames = f.tape.frames_from_map(x);
        debug_assert_eq!(f.tape.value(frames).shape()[0], t);
        self.to_latent.forward(f, frames)
    }

    /// Straight-through quantization: the output value is the codeword row
    /// bit-exactly, gradient passes to `z` unchanged, and the codebook is
    /// reached only through the returned differentiable lookup.
    fn quantize_nodes(&self, f: &mut Fwd, z: NodeId) -> (NodeId, NodeId, Vec<usize>) {
        let zv = to2(f.tape.value(z));
        let cb = to2(self.store.value(self.codebook));
        let indices = nearest_codewords(&zv, &cb);
        let cb_node = f.leaf(self.codebook);
        let lookup = f.tape.embed_rows(cb_node, &indices);
        let replacement = f.tape.value(lookup).clone();
        let z_q = f.tape.straight_through(z, replacement);
        (z_q, lookup, indices)
    }

    fn decode_nodes(&self, f: &mut Fwd, z_q: NodeId, speaker_idx: usize) -> NodeId {
        let wf = latent_width();
        let c2 = self.cfg.vq_channels2;
        let h = self.from_latent.forward(f, z_q);
        let mut x = f.tape.map_from_frames(h, c2, wf);
        let spk_node = f.leaf(self.spk_table);
        let spk = f.tape.embed_rows(spk_node, &[speaker_idx]);
        let spk = self.spk_proj.forward(f, spk);
        x = f.tape.add_channel_bias(x, spk);
        for res in &self.dec_res {
            x = res.forward(f, x);
        }
        let x = f.tape.upsample_w2(x);
        let x = self.dec_conv1.forward(f, x);
        let x = self.dec_norm1.forward(f, x);
        let x = f.tape.relu(x);
        let x = f.tape.upsample_w2(x);
        let x = self.dec_conv2.forward(f, x);
        f.tape.frames_from_map(x)
    }

    /// Frozen-model extraction of the frame-level style codes H_se
    /// (`T x d_style`). Inputs are the normalized pitch/energy tracks.
    pub fn extract_style(
        &self,
        mel20: &Array2<f64>,
        f0_norm: &[f64],
        energy_norm: &[f64],
        text_style: &Array2<f64>,
    ) -> Result<Array2<f64>> {
        EXTRACT_CALLS.fetch_add(1, Ordering::Relaxed);
        self.check_shapes(mel20, f0_norm, energy_norm)?;
        let mut tape = Tape::new();
        let mut f = Fwd::frozen(&mut tape, &self.store);
        let z = self.encode_nodes(&mut f, mel20, f0_norm, energy_norm, text_style);
        if self.cfg.vq_pre_quant_style {
            return Ok(to2(tape.value(z)));
        }
        let (z_q, _, _) = self.quantize_nodes(&mut Fwd::frozen(&mut tape, &self.store), z);
        Ok(to2(tape.value(z_q)))
    }

    /// As `extract_style` but also returns the codeword indices.
    pub fn extract_codes(
        &self,
        mel20: &Array2<f64>,
        f0_norm: &[f64],
        energy_norm: &[f64],
        text_style: &Array2<f64>,
    ) -> Result<(Array2<f64>, Vec<usize>)> {
        EXTRACT_CALLS.fetch_add(1, Ordering::Relaxed);
        self.check_shapes(mel20, f0_norm, energy_norm)?;
        let mut tape = Tape::new();
        let mut f = Fwd::frozen(&mut tape, &self.store);
        let z = self.encode_nodes(&mut f, mel20, f0_norm, energy_norm, text_style);
        let (z_q, _, indices) = self.quantize_nodes(&mut Fwd::frozen(&mut tape, &self.store), z);
        Ok((to2(tape.value(z_q)), indices))
    }

    /// Convenience wrapper taking raw features plus normalization stats.
    pub fn extract_for_features(
        &self,
        feats: &AcousticFeatures,
        stats: &FeatureStats,
        speaker: &str,
        text_style: &Array2<f64>,
    ) -> Result<Array2<f64>> {
        let f0 = stats.norm_f0(&feats.f0, speaker);
        let en = stats.norm_energy(&feats.energy, speaker);
        self.extract_style(&feats.mel20, &f0, &en, text_style)
    }

    pub fn codebook_values(&self) -> Array2<f64> {
        to2(self.store.value(self.codebook))
    }

    pub fn checksum(&self) -> String {
        self.store.checksum()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let extra = serde_json::json!({
            "speakers": self.speakers,
            "usage_counts": self.usage_counts,
            "frozen": self.frozen,
        });
        checkpoint::save(path, COMPONENT, &self.cfg, &self.store, extra, None)
    }

    pub fn load(path: &Path) -> Result<StyleExtractorModel> {
        let ck = checkpoint::load(path)?;
        ck.expect_component(COMPONENT)?;
        let speakers: Vec<String> = serde_json::from_value(ck.extra["speakers"].clone())?;
        let mut model = StyleExtractorModel::new(&ck.config, speakers, 0);
        ck.apply_to(&mut model.store)?;
        model.usage_counts = serde_json::from_value(ck.extra["usage_counts"].clone())?;
        model.frozen = ck.extra["frozen"].as_bool().unwrap_or(false);
        Ok(model)
    }
}

fn col(v: &[f64]) -> ArrayD<f64> {
    ArrayD::from_shape_vec(IxDyn(&[v.len(), 1]), v.to_vec()).expect("column")
}

fn to2(v: &ArrayD<f64>) -> Array2<f64> {
    v.view().into_dimensionality::<ndarray::Ix2>().expect("2-d").to_owned()
}

/// Loss breakdown for one conditioned Mel20 segment.
pub struct VqLossNodes {
    pub total: NodeId,
    pub recon: NodeId,
    pub vq: NodeId,
    pub commit: NodeId,
    pub indices: Vec<usize>,
}

/// `total = recon + vq + beta * commit`; the vq term is dropped when the
/// EMA codebook update is active.
pub fn vqvae_loss(
    model: &StyleExtractorModel,
    tape: &mut Tape,
    mel20: &Array2<f64>,
    f0_norm: &[f64],
    energy_norm: &[f64],
    text_style: &Array2<f64>,
    speaker_idx: usize,
) -> Result<VqLossNodes> {
    model.check_shapes(mel20, f0_norm, energy_norm)?;
    let mut f = Fwd::new(tape, &model.store);
    let z = model.encode_nodes(&mut f, mel20, f0_norm, energy_norm, text_style);
    let (z_q, lookup, indices) = model.quantize_nodes(&mut f, z);
    let recon_out = model.decode_nodes(&mut f, z_q, speaker_idx);
    let target = f.tape.constant(mel20.clone().into_dyn());
    let recon = f.tape.mse(recon_out, target);
    let z_sg = f.tape.stop_grad(z);
    let vq = f.tape.mse(z_sg, lookup);
    let lookup_sg = f.tape.stop_grad(lookup);
    let commit = f.tape.mse(z, lookup_sg);
    let commit_scaled = f.tape.scale(commit, model.cfg.commitment_beta);
    let total = if model.cfg.vq_ema {
        f.tape.add(recon, commit_scaled)
    } else {
        let rv = f.tape.add(recon, vq);
        f.tape.add(rv, commit_scaled)
    };
    Ok(VqLossNodes { total, recon, vq, commit, indices })
}

/// Codebook usage entropy, exponentiated; 1.0 means total collapse.
pub fn perplexity(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return 1.0;
    }
    let mut h = 0.0;
    for &c in counts {
        if c > 0 {
            let p = c as f64 / total as f64;
            h -= p * p.ln();
        }
    }
    h.exp()
}

#[derive(Debug, Clone, Serialize)]
pub struct ExtractorReport {
    pub epoch_recon: Vec<f64>,
    pub epoch_vq: Vec<f64>,
    pub epoch_commit: Vec<f64>,
    pub epoch_perplexity: Vec<f64>,
}

struct TrainItem {
    mel20: Array2<f64>,
    f0: Vec<f64>,
    energy: Vec<f64>,
    text_emb: Array2<f64>,
    speaker_idx: usize,
}

/// Stage-ii pre-training over the cached features of the manifest's train
/// split. The text model must already be frozen.
pub fn pretrain_style_extractor(
    manifest: &Manifest,
    prep_dir: &Path,
    text_model: &TextStyleModel,
    cfg: &Config,
    out_dir: Option<&Path>,
) -> Result<(StyleExtractorModel, ExtractorReport)> {
    if !text_model.frozen {
        return Err(Error::FrozenContractViolation(
            "text style encoder must be frozen before stage ii".into(),
        ));
    }
    let train = manifest.split_indices(Split::Train);
    if train.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let stats = FeatureStats::load(&prep_dir.join("stats.json"))?;
    let cache_dir = prep_dir.join("cache");

    let items: Vec<TrainItem> = {
        let loaded: Vec<Result<TrainItem>> = par::par_map(&train, |&i| {
            let rec = &manifest.records[i];
            let feats = read_feature_record(&cache_path(&cache_dir, &rec.id))?;
            Ok(TrainItem {
                f0: stats.norm_f0(&feats.f0, &rec.speaker_id),
                energy: stats.norm_energy(&feats.energy, &rec.speaker_id),
                mel20: feats.mel20,
                text_emb: text_model.encode_style(&rec.text),
                speaker_idx: manifest.speaker_index(&rec.speaker_id).unwrap_or(0),
            })
        });
        loaded.into_iter().collect::<Result<Vec<_>>>()?
    };

    let mut model = StyleExtractorModel::new(cfg, manifest.speakers.clone(), cfg.seed ^ 0x5E);
    let mut adam = Adam::new(
        &model.store,
        cfg.learning_rate,
        cfg.adam_beta1,
        cfg.adam_beta2,
        cfg.adam_eps,
        cfg.warmup_steps,
    );
    let mut report = ExtractorReport {
        epoch_recon: Vec::new(),
        epoch_vq: Vec::new(),
        epoch_commit: Vec::new(),
        epoch_perplexity: Vec::new(),
    };
    let mut log: Vec<(u64, usize, f64, f64, f64)> = Vec::new();
    let mut step = 0u64;

    for epoch in 0..cfg.extractor_epochs {
        let mut order: Vec<usize> = (0..items.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xE0 ^ (epoch as u64) << 8);
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_counts = vec![0u64; cfg.codebook_size];
        let mut sums = (0.0, 0.0, 0.0);
        let mut batches = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            let parts: Vec<Result<(GradStore, f64, f64, f64, Vec<usize>)>> =
                par::par_map(batch, |&bi| {
                    let item = &items[bi];
                    let mut tape = Tape::new();
                    let losses = vqvae_loss(
                        &model,
                        &mut tape,
                        &item.mel20,
                        &item.f0,
                        &item.energy,
                        &item.text_emb,
                        item.speaker_idx,
                    )?;
                    let mut grads = GradStore::new(&model.store);
                    let seed = ArrayD::from_elem(IxDyn(&[1, 1]), scale);
                    tape.backward_seeded(&[(losses.total, seed)], &mut grads);
                    Ok((
                        grads,
                        tape.scalar(losses.recon),
                        tape.scalar(losses.vq),
                        tape.scalar(losses.commit),
                        losses.indices,
                    ))
                });
            let mut merged = GradStore::new(&model.store);
            let mut batch_losses = (0.0, 0.0, 0.0);
            let mut batch_assignments: Vec<Vec<usize>> = Vec::new();
            for part in parts {
                let (g, r, v, c, idx) = part?;
                merged.merge(&g);
                batch_losses.0 += r * scale;
                batch_losses.1 += v * scale;
                batch_losses.2 += c * scale;
                for &j in &idx {
                    epoch_counts[j] += 1;
                    model.usage_counts[j] += 1;
                }
                batch_assignments.push(idx);
            }
            adam.apply(&mut model.store, &merged);
            if cfg.vq_ema {
                ema_update(&mut model, &items, batch, &batch_assignments, cfg);
            }
            step += 1;
            sums.0 += batch_losses.0;
            sums.1 += batch_losses.1;
            sums.2 += batch_losses.2;
            batches += 1;
            log.push((step, epoch, batch_losses.0, batch_losses.1, batch_losses.2));
        }
        if cfg.vq_restart_dead {
            restart_dead_codes(&mut model, &items, &epoch_counts, cfg, epoch);
        }
        report.epoch_recon.push(sums.0 / batches as f64);
        report.epoch_vq.push(sums.1 / batches as f64);
        report.epoch_commit.push(sums.2 / batches as f64);
        report.epoch_perplexity.push(perplexity(&epoch_counts));
    }

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        use std::io::Write;
        let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("extractor_loss_log.csv"))?);
        writeln!(f, "step,epoch,recon,vq,commit")?;
        for (s, e, r, v, c) in &log {
            writeln!(f, "{s},{e},{r},{v},{c}")?;
        }
    }
    Ok((model, report))
}

/// Exponential-moving-average codebook update (config flag), replacing the
/// gradient route for the dictionary.
fn ema_update(
    model: &mut StyleExtractorModel,
    items: &[TrainItem],
    batch: &[usize],
    assignments: &[Vec<usize>],
    cfg: &Config,
) {
    let d = cfg.d_style;
    let k = cfg.codebook_size;
    let mut counts = vec![0.0f64; k];
    let mut sums = Array2::<f64>::zeros((k, d));
    for (bpos, &bi) in batch.iter().enumerate() {
        let item = &items[bi];
        // Recompute z for the updated encoder; cheap at fixture scale.
        let mut tape = Tape::new();
        let mut f = Fwd::frozen(&mut tape, &model.store);
        let z = model.encode_nodes(&mut f, &item.mel20, &item.f0, &item.energy, &item.text_emb);
        let zv = to2(tape.value(z));
        for (t, &j) in assignments[bpos].iter().enumerate() {
            counts[j] += 1.0;
            let mut row = sums.row_mut(j);
            row += &zv.row(t);
        }
    }
    let decay = cfg.vq_ema_decay;
    let cb = model.store.value_mut(model.codebook);
    for j in 0..k {
        if counts[j] == 0.0 {
            continue;
        }
        let mean = sums.row(j).mapv(|x| x / counts[j]);
        for c in 0..d {
            cb[[j, c]] = decay * cb[[j, c]] + (1.0 - decay) * mean[c];
        }
    }
}

/// Re-seed codewords that were never used this epoch from random encoder
/// outputs (config flag; default is log-only).
fn restart_dead_codes(
    model: &mut StyleExtractorModel,
    items: &[TrainItem],
    epoch_counts: &[u64],
    cfg: &Config,
    epoch: usize,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xDEAD ^ (epoch as u64));
    let dead: Vec<usize> = epoch_counts
        .iter()
        .enumerate()
        .filter(|(_, &c)| c == 0)
        .map(|(j, _)| j)
        .collect();
    if dead.is_empty() || items.is_empty() {
        return;
    }
    let item = &items[rng.random_range(0..items.len())];
    let mut tape = Tape::new();
    let mut f = Fwd::frozen(&mut tape, &model.store);
    let z = model.encode_nodes(&mut f, &item.mel20, &item.f0, &item.energy, &item.text_emb);
    let zv = to2(tape.value(z));
    let cb = model.store.value_mut(model.codebook);
    for j in dead {
        let t = rng.random_range(0..zv.nrows());
        for c in 0..zv.ncols() {
            cb[[j, c]] = zv[[t, c]];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rand2(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    fn tiny_cfg() -> Config {
        let mut cfg = Config::default();
        cfg.d_style = 8;
        cfg.vq_channels1 = 4;
        cfg.vq_channels2 = 6;
        cfg.vq_resblocks = 1;
        cfg.codebook_size = 16;
        cfg
    }

    fn tiny_model(cfg: &Config) -> StyleExtractorModel {
        StyleExtractorModel::new(cfg, vec!["spk0".into(), "spk1".into()], 9)
    }

    #[test]
    fn quantize_matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cb = rand2(&mut rng, 64, 8);
        let z = rand2(&mut rng, 200, 8);
        let (z_q, idx) = quantize(&cb, &z);
        for t in 0..z.nrows() {
            // Independent naive scan.
            let mut best = (f64::INFINITY, 0usize);
            for j in 0..cb.nrows() {
                let d2: f64 = (0..8).map(|c| (z[[t, c]] - cb[[j, c]]).powi(2)).sum();
                if d2 < best.0 {
                    best = (d2, j);
                }
            }
            assert_eq!(idx[t], best.1);
            for c in 0..8 {
                assert_eq!(z_q[[t, c]], cb[[best.1, c]]);
            }
        }
    }

    #[test]
    fn quantize_tie_breaks_to_lowest_index() {
        let mut cb = Array2::<f64>::zeros((4, 2));
        cb.row_mut(1).assign(&ndarray::arr1(&[1.0, 0.0]));
        cb.row_mut(2).assign(&ndarray::arr1(&[1.0, 0.0])); // duplicate of 1
        cb.row_mut(3).assign(&ndarray::arr1(&[-1.0, 0.0])); // mirror of 1 around z
        let z = Array2::<f64>::zeros((1, 2));
        // Codewords 0..3: index 0 is exactly z, wins outright.
        assert_eq!(quantize(&cb, &z).1, vec![0]);
        // Equidistant duplicates: lowest index wins.
        let z1 = ndarray::arr2(&[[1.0, 0.0]]);
        assert_eq!(quantize(&cb, &z1).1, vec![1]);
        let mid = ndarray::arr2(&[[0.0, 5.0]]); // rows 1 and 3 equidistant, 0 closer
        let (_, idx) = quantize(&cb, &mid);
        assert_eq!(idx, vec![0]);
    }

    #[test]
    fn quantize_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cb = rand2(&mut rng, 32, 6);
        let z = rand2(&mut rng, 50, 6);
        let (z_q, idx) = quantize(&cb, &z);
        let (_, idx2) = quantize(&cb, &z_q);
        assert_eq!(idx, idx2);
    }

    #[test]
    fn straight_through_copies_gradient() {
        let cfg = tiny_cfg();
        let model = tiny_model(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // 2 x 4-ish toy: T=2 latent rows of width d_style.
        let zval = rand2(&mut rng, 2, cfg.d_style);
        let mut store = ParamStore::new();
        let zid = store.add("z", zval.clone().into_dyn());
        let mut tape = Tape::new();
        let z = tape.param(&store, zid);
        let mut f = Fwd { tape: &mut tape, store: &model.store, trainable: true };
        // Reuse the model's quantizer wiring on an arbitrary z leaf.
        let zv = to2(f.tape.value(z));
        let cb = model.codebook_values();
        let indices = nearest_codewords(&zv, &cb);
        let cbn = f.tape.constant(cb.into_dyn());
        let lookup = f.tape.embed_rows(cbn, &indices);
        let replacement = f.tape.value(lookup).clone();
        let z_q = f.tape.straight_through(z, replacement);
        let w = tape.constant(rand2(&mut rng, cfg.d_style, 3).into_dyn());
        let y = tape.matmul(z_q, w);
        let ss = tape.row_sum_sq(y);
        let loss = tape.sum_all(ss);
        let mut grads = GradStore::new(&store);
        let node_grads = tape.backward(loss, &mut grads);
        let gz = node_grads.get(z).unwrap();
        let gq = node_grads.get(z_q).unwrap();
        for (a, b) in gz.iter().zip(gq.iter()) {
            let denom = a.abs().max(b.abs()).max(1e-12);
            assert!((a - b).abs() / denom < 1e-12, "straight-through must copy gradients");
        }
    }

    #[test]
    fn extract_rows_are_codebook_rows_and_time_preserved() {
        let cfg = tiny_cfg();
        let model = tiny_model(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for t in [1usize, 7, 62] {
            let mel20 = rand2(&mut rng, t, 20);
            let f0: Vec<f64> = (0..t).map(|_| rng.random_range(-1.0..1.0)).collect();
            let en: Vec<f64> = (0..t).map(|_| rng.random_range(-1.0..1.0)).collect();
            let text = rand2(&mut rng, 1, cfg.d_style);
            let (h_se, idx) = model.extract_codes(&mel20, &f0, &en, &text).unwrap();
            assert_eq!(h_se.nrows(), t);
            assert_eq!(idx.len(), t);
            let cb = model.codebook_values();
            for (r, &j) in idx.iter().enumerate() {
                for c in 0..cfg.d_style {
                    assert_eq!(h_se[[r, c]], cb[[j, c]], "H_se row must be codeword row");
                }
            }
        }
    }

    #[test]
    fn extraction_deterministic_and_speaker_invariant() {
        let cfg = tiny_cfg();
        let model = tiny_model(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mel20 = rand2(&mut rng, 12, 20);
        let f0: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let en: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let text = rand2(&mut rng, 1, cfg.d_style);
        let a = model.extract_style(&mel20, &f0, &en, &text).unwrap();
        let b = model.extract_style(&mel20, &f0, &en, &text).unwrap();
        assert_eq!(a, b);
        // Speaker conditioning is decoder-side only: H_se cannot depend on it.
        // (extract_style never takes a speaker; the invariance shows up as the
        // decoder being the only consumer of the speaker table.)
        let mut tape = Tape::new();
        let mut f = Fwd::frozen(&mut tape, &model.store);
        let z = model.encode_nodes(&mut f, &mel20, &f0, &en, &text);
        let (z_q, _, _) = model.quantize_nodes(&mut Fwd::frozen(&mut tape, &model.store), z);
        let d0 = model.decode_nodes(&mut Fwd::frozen(&mut tape, &model.store), z_q, 0);
        let d1 = model.decode_nodes(&mut Fwd::frozen(&mut tape, &model.store), z_q, 1);
        assert_ne!(tape.value(d0), tape.value(d1), "decoder must hear the speaker");
    }

    #[test]
    fn loss_zero_cases_and_commit_quadratic() {
        let cfg = tiny_cfg();
        let model = tiny_model(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mel20 = rand2(&mut rng, 6, 20);
        let f0 = vec![0.5; 6];
        let en = vec![-0.2; 6];
        let text = rand2(&mut rng, 1, cfg.d_style);
        let mut tape = Tape::new();
        let l = vqvae_loss(&model, &mut tape, &mel20, &f0, &en, &text, 0).unwrap();
        let (recon, vq, commit) = (tape.scalar(l.recon), tape.scalar(l.vq), tape.scalar(l.commit));
        let total = tape.scalar(l.total);
        assert!((total - (recon + vq + cfg.commitment_beta * commit)).abs() < 1e-12);
        // z exactly on codewords -> vq = commit = 0.
        let mut t2 = Tape::new();
        let cb = model.codebook_values();
        let z = t2.constant(cb.slice(ndarray::s![0..4, ..]).to_owned().into_dyn());
        let mut f2 = Fwd::frozen(&mut t2, &model.store);
        let (_, lookup, _) = model.quantize_nodes(&mut f2, z);
        let vq0 = t2.mse(z, lookup);
        assert!(t2.scalar(vq0) < 1e-24);
        // Quadratic: doubling the commit distance quadruples the term. Use a
        // well-separated codebook so the assignment cannot flip.
        let mut wide = Array2::<f64>::zeros((4, cfg.d_style));
        for j in 0..4 {
            wide[[j, 0]] = j as f64 * 100.0;
        }
        let d: f64 = 0.3;
        let mut commits = Vec::new();
        for scale in [1.0, 2.0] {
            let mut zoff = wide.row(0).to_owned().insert_axis(ndarray::Axis(0));
            zoff[[0, 1]] = d * scale;
            let (zq, idx) = quantize(&wide, &zoff);
            assert_eq!(idx, vec![0]);
            let commit: f64 = (0..cfg.d_style)
                .map(|c| (zoff[[0, c]] - zq[[0, c]]).powi(2))
                .sum::<f64>()
                / cfg.d_style as f64;
            commits.push(commit);
        }
        assert!((commits[1] / commits[0] - 4.0).abs() < 1e-9);
    }

    #[test]
    fn perplexity_bounds() {
        assert_eq!(perplexity(&[0, 0, 0]), 1.0);
        assert!((perplexity(&[5, 0, 0]) - 1.0).abs() < 1e-12);
        assert!((perplexity(&[3, 3, 3]) - 3.0).abs() < 1e-9);
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = tiny_cfg();
        let mut model = tiny_model(&cfg);
        model.frozen = true;
        model.usage_counts[3] = 17;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ext.bvck");
        model.save(&path).unwrap();
        let back = StyleExtractorModel::load(&path).unwrap();
        assert_eq!(model.checksum(), back.checksum());
        assert!(back.frozen);
        assert_eq!(back.usage_counts[3], 17);
        assert_eq!(back.speakers, model.speakers);
    }
}
