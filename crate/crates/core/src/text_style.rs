//! Utterance-level style embeddings from text.
//!
//! A small transformer backbone is pre-trained from scratch in two phases:
//! contrastive learning against emotion-word substitutions (in-batch
//! negatives), then joint training with a Student-t clustering loss and an
//! autoencoding reconstruction term. After pre-training the model is frozen
//! and serves both paths of the TTS model.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::nn::layers::{pos_encoding, Embedding, FftBlock, Fwd, Linear};
use crate::nn::optim::Adam;
use crate::nn::params::{GradStore, ParamId, ParamStore};
use crate::nn::tape::{NodeId, Tape};
use crate::par;

pub const COMPONENT: &str = "text_style";
const UNK: usize = 0;

/// Whitespace tokenizer with character fallback for out-of-vocabulary words.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
}

impl Vocab {
    pub fn build(corpus: &[String]) -> Vocab {
        let mut words: Vec<String> = corpus
            .iter()
            .flat_map(|s| s.to_lowercase().split_whitespace().map(String::from).collect::<Vec<_>>())
            .collect();
        words.sort();
        words.dedup();
        let mut chars: Vec<String> = words
            .iter()
            .flat_map(|w| w.chars())
            .map(|c| format!("c:{c}"))
            .collect();
        chars.sort();
        chars.dedup();
        let mut tokens = vec!["<unk>".to_string()];
        tokens.extend(words);
        tokens.extend(chars);
        Vocab::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Vocab {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut ids = Vec::new();
        for word in text.to_lowercase().split_whitespace() {
            if let Some(&id) = self.index.get(word) {
                ids.push(id);
            } else {
                for ch in word.chars() {
                    ids.push(*self.index.get(&format!("c:{ch}")).unwrap_or(&UNK));
                }
            }
        }
        ids
    }
}

/// Same-emotion substitution table; closed under substitution.
#[derive(Debug, Clone)]
pub struct EmotionLexicon {
    entries: BTreeMap<String, Vec<String>>,
}

impl EmotionLexicon {
    pub fn from_map(entries: BTreeMap<String, Vec<String>>) -> Result<EmotionLexicon> {
        for (word, subs) in &entries {
            if subs.is_empty() {
                return Err(Error::InvalidLexicon(format!("`{word}` has no substitutes")));
            }
            for s in subs {
                if !entries.contains_key(s) {
                    return Err(Error::InvalidLexicon(format!(
                        "substitute `{s}` of `{word}` is not itself an entry"
                    )));
                }
            }
        }
        Ok(EmotionLexicon { entries })
    }

    pub fn load(path: &Path) -> Result<EmotionLexicon> {
        let map: BTreeMap<String, Vec<String>> =
            serde_json::from_str(&std::fs::read_to_string(path)?)?;
        Self::from_map(map)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.entries.contains_key(word)
    }

    pub fn substitutes(&self, word: &str) -> Option<&[String]> {
        self.entries.get(word).map(|v| v.as_slice())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugmentFlag {
    Replaced,
    NoAugmentation,
}

/// Replace exactly one occurrence of a lexicon word with a seeded-random
/// same-emotion substitute; texts without lexicon words pass through.
pub fn augment_positive(
    lexicon: &EmotionLexicon,
    text: &str,
    rng_seed: u64,
) -> (String, AugmentFlag) {
    let tokens: Vec<&str> = text.split_whitespace().collect();
    let hits: Vec<usize> = tokens
        .iter()
        .enumerate()
        .filter(|(_, t)| lexicon.contains(&t.to_lowercase()))
        .map(|(i, _)| i)
        .collect();
    if hits.is_empty() {
        return (text.to_string(), AugmentFlag::NoAugmentation);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let pick = hits[rng.random_range(0..hits.len())];
    let subs = lexicon.substitutes(&tokens[pick].to_lowercase()).expect("hit is an entry");
    let replacement = &subs[rng.random_range(0..subs.len())];
    let mut out: Vec<String> = tokens.iter().map(|t| t.to_string()).collect();
    out[pick] = replacement.clone();
    (out.join(" "), AugmentFlag::Replaced)
}

pub struct TextStyleModel {
    pub store: ParamStore,
    pub vocab: Vocab,
    pub cfg: Config,
    pub frozen: bool,
    embed: Embedding,
    blocks: Vec<FftBlock>,
    proj_enc: Linear,
    proj_dec: Linear,
    null_emb: ParamId,
    centroids: ParamId,
}

impl TextStyleModel {
    pub fn new(cfg: &Config, vocab: Vocab, seed: u64) -> TextStyleModel {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.text_dim;
        let embed = Embedding::new(&mut store, &mut rng, "backbone.embed", vocab.len(), d);
        let blocks = (0..cfg.text_layers)
            .map(|i| {
                FftBlock::new(
                    &mut store,
                    &mut rng,
                    &format!("backbone.block{i}"),
                    d,
                    cfg.text_heads,
                    cfg.text_ffn_hidden,
                    1,
                )
            })
            .collect();
        let proj_enc = Linear::new(&mut store, &mut rng, "projection.enc", d, cfg.d_style);
        let proj_dec = Linear::new(&mut store, &mut rng, "projection.dec", cfg.d_style, d);
        let null_emb =
            store.add("projection.null", crate::nn::params::normal(&mut rng, &[1, cfg.d_style], 0.02));
        let centroids = store.add(
            "clustering.centroids",
            crate::nn::params::normal(&mut rng, &[cfg.clusters, cfg.d_style], 0.05),
        );
        TextStyleModel {
            store,
            vocab,
            cfg: cfg.clone(),
            frozen: false,
            embed,
            blocks,
            proj_enc,
            proj_dec,
            null_emb,
            centroids,
        }
    }

    /// Style embedding node plus the pooled backbone feature (`1 x text_dim`)
    /// that the reconstruction head targets.
    fn encode_nodes(&self, f: &mut Fwd, text: &str) -> (NodeId, Option<NodeId>) {
        let ids = self.vocab.encode(text);
        if ids.is_empty() {
            let null = f.leaf(self.null_emb);
            return (null, None);
        }
        let x = self.embed.forward(f, &ids);
        let pe = pos_encoding(ids.len(), self.cfg.text_dim);
        let pe = f.tape.constant(pe.into_dyn());
        let mut x = f.tape.add(x, pe);
        for block in &self.blocks {
            x = block.forward(f, x);
        }
        let pooled = f.tape.mean_rows(x);
        let z = self.proj_enc.forward(f, pooled);
        (z, Some(pooled))
    }

    /// Deterministic eval-mode embedding, `1 x d_style`.
    pub fn encode_style(&self, text: &str) -> Array2<f64> {
        let mut tape = Tape::new();
        let mut f = Fwd::frozen(&mut tape, &self.store);
        let (z, _) = self.encode_nodes(&mut f, text);
        to2(tape.value(z))
    }

    /// Stack the window's embeddings, one row per slot; the center row is
    /// the current utterance.
    pub fn encode_context(&self, window: &[String]) -> Result<Array2<f64>> {
        if window.len() % 2 == 0 {
            return Err(Error::BadWindow(window.len()));
        }
        let rows: Vec<Array2<f64>> = window.iter().map(|s| self.encode_style(s)).collect();
        let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
        Ok(ndarray::concatenate(ndarray::Axis(0), &views).expect("same widths"))
    }

    pub fn checksum(&self) -> String {
        self.store.checksum()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let extra = serde_json::json!({
            "vocab": self.vocab.tokens(),
            "frozen": self.frozen,
        });
        checkpoint::save(path, COMPONENT, &self.cfg, &self.store, extra, None)
    }

    pub fn load(path: &Path) -> Result<TextStyleModel> {
        let ck = checkpoint::load(path)?;
        ck.expect_component(COMPONENT)?;
        let tokens: Vec<String> = serde_json::from_value(ck.extra["vocab"].clone())?;
        let mut model = TextStyleModel::new(&ck.config, Vocab::from_tokens(tokens), 0);
        ck.apply_to(&mut model.store)?;
        model.frozen = ck.extra["frozen"].as_bool().unwrap_or(false);
        Ok(model)
    }
}

fn to2(v: &ArrayD<f64>) -> Array2<f64> {
    v.view().into_dimensionality::<ndarray::Ix2>().expect("2-d").to_owned()
}

/// Per-epoch loss curves from pre-training.
#[derive(Debug, Clone, Serialize)]
pub struct PretrainReport {
    pub phase1_contrastive: Vec<f64>,
    pub phase2_joint: Vec<f64>,
}

/// NT-Xent over `2B` embeddings laid out `[originals.., positives..]`.
/// Returns the loss value and the gradient at each embedding.
fn contrastive_batch(
    embeddings: &[Array2<f64>],
    temperature: f64,
) -> Result<(f64, Vec<Array2<f64>>)> {
    let b2 = embeddings.len();
    let b = b2 / 2;
    if b < 2 {
        return Err(Error::ContrastiveBatchTooSmall(b));
    }
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> = embeddings
        .iter()
        .enumerate()
        .map(|(i, e)| store.add(&format!("z{i}"), e.clone().into_dyn()))
        .collect();
    let mut tape = Tape::new();
    let leaves: Vec<NodeId> = ids.iter().map(|id| tape.param(&store, *id)).collect();
    let stacked = tape.concat_rows(&leaves);
    let normed = tape.l2_normalize_rows(stacked);
    let sims = tape.matmul_nt(normed, normed);
    let scaled = tape.scale(sims, 1.0 / temperature);
    let mut mask = Array2::<f64>::zeros((b2, b2));
    for i in 0..b2 {
        mask[[i, i]] = -1e9;
    }
    let mask = tape.constant(mask.into_dyn());
    let masked = tape.add(scaled, mask);
    let targets: Vec<usize> = (0..b2).map(|i| if i < b { i + b } else { i - b }).collect();
    let loss = tape.cross_entropy_rows(masked, &targets);
    let mut grads = GradStore::new(&store);
    tape.backward(loss, &mut grads);
    let out = ids
        .iter()
        .map(|id| grads.get(*id).map(|g| to2(g)).unwrap_or_else(|| Array2::zeros((1, 1))))
        .collect();
    Ok((tape.scalar(loss), out))
}

/// Student-t soft assignments of rows of `z` to centroids.
fn soft_assignments(z: &Array2<f64>, centroids: &Array2<f64>) -> Array2<f64> {
    let (n, c) = (z.nrows(), centroids.nrows());
    let mut q = Array2::<f64>::zeros((n, c));
    for i in 0..n {
        let mut total = 0.0;
        for j in 0..c {
            let mut d2 = 0.0;
            for k in 0..z.ncols() {
                let d = z[[i, k]] - centroids[[j, k]];
                d2 += d * d;
            }
            let v = 1.0 / (1.0 + d2);
            q[[i, j]] = v;
            total += v;
        }
        for j in 0..c {
            q[[i, j]] /= total;
        }
    }
    q
}

/// DEC target distribution, computed from detached assignments.
fn target_distribution(q: &Array2<f64>) -> Array2<f64> {
    let (n, c) = (q.nrows(), q.ncols());
    let freq: Vec<f64> = (0..c).map(|j| q.column(j).sum().max(1e-12)).collect();
    let mut p = Array2::<f64>::zeros((n, c));
    for i in 0..n {
        let mut total = 0.0;
        for j in 0..c {
            p[[i, j]] = q[[i, j]] * q[[i, j]] / freq[j];
            total += p[[i, j]];
        }
        for j in 0..c {
            p[[i, j]] /= total;
        }
    }
    p
}

fn kmeans(embeddings: &Array2<f64>, k: usize, seed: u64) -> Array2<f64> {
    let n = embeddings.nrows();
    let d = embeddings.ncols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = Array2::<f64>::zeros((k, d));
    for j in 0..k {
        let pick = rng.random_range(0..n);
        centroids.row_mut(j).assign(&embeddings.row(pick));
    }
    let mut assign = vec![0usize; n];
    for _ in 0..20 {
        for (i, a) in assign.iter_mut().enumerate() {
            let mut best = (f64::INFINITY, 0usize);
            for j in 0..k {
                let mut d2 = 0.0;
                for c in 0..d {
                    let delta = embeddings[[i, c]] - centroids[[j, c]];
                    d2 += delta * delta;
                }
                if d2 < best.0 {
                    best = (d2, j);
                }
            }
            *a = best.1;
        }
        for j in 0..k {
            let members: Vec<usize> = (0..n).filter(|&i| assign[i] == j).collect();
            if members.is_empty() {
                continue;
            }
            let mut mean = vec![0.0f64; d];
            for &i in &members {
                for c in 0..d {
                    mean[c] += embeddings[[i, c]];
                }
            }
            for (c, m) in mean.iter().enumerate() {
                centroids[[j, c]] = m / members.len() as f64;
            }
        }
    }
    centroids
}

/// Stage-i pre-training: contrastive phase, k-means centroid init, then the
/// joint clustering + reconstruction + contrastive phase. Writes
/// `text_loss_log.csv` into `out_dir` when given.
pub fn pretrain_style_encoder(
    corpus: &[String],
    lexicon: &EmotionLexicon,
    cfg: &Config,
    out_dir: Option<&Path>,
) -> Result<(TextStyleModel, PretrainReport)> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let vocab = Vocab::build(corpus);
    let mut model = TextStyleModel::new(cfg, vocab, cfg.seed);
    let mut adam = Adam::new(
        &model.store,
        cfg.learning_rate,
        cfg.adam_beta1,
        cfg.adam_beta2,
        cfg.adam_eps,
        cfg.warmup_steps,
    );
    let mut log: Vec<(u64, usize, &str, f64)> = Vec::new();
    let mut report = PretrainReport { phase1_contrastive: Vec::new(), phase2_joint: Vec::new() };
    let mut step = 0u64;

    for phase in 1..=2 {
        let epochs = if phase == 1 { cfg.text_phase1_epochs } else { cfg.text_phase2_epochs };
        if phase == 2 {
            // Initialize centroids from the current embedding space.
            let embs = embed_corpus(&model, corpus);
            let centroids = kmeans(&embs, cfg.clusters, cfg.seed ^ 0xC1C1);
            *model.store.value_mut(model.centroids) = centroids.into_dyn();
        }
        for epoch in 0..epochs {
            let mut order: Vec<usize> = (0..corpus.len()).collect();
            let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (phase as u64) << 32 ^ epoch as u64);
            for i in (1..order.len()).rev() {
                let j = shuffle_rng.random_range(0..=i);
                order.swap(i, j);
            }
            let mut epoch_losses = Vec::new();
            for batch in order.chunks(cfg.batch_size) {
                let loss = train_batch(&mut model, &mut adam, lexicon, corpus, batch, phase, cfg, step)?;
                epoch_losses.push(loss);
                step += 1;
                log.push((step, epoch, if phase == 1 { "contrastive" } else { "joint" }, loss));
            }
            let mean = epoch_losses.iter().sum::<f64>() / epoch_losses.len().max(1) as f64;
            if phase == 1 {
                report.phase1_contrastive.push(mean);
            } else {
                report.phase2_joint.push(mean);
            }
        }
    }

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("text_loss_log.csv"))?);
        writeln!(f, "step,epoch,phase,loss")?;
        for (s, e, p, l) in &log {
            writeln!(f, "{s},{e},{p},{l}")?;
        }
    }
    Ok((model, report))
}

fn embed_corpus(model: &TextStyleModel, corpus: &[String]) -> Array2<f64> {
    let rows: Vec<Array2<f64>> = par::par_map(corpus, |text| model.encode_style(text));
    let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
    ndarray::concatenate(ndarray::Axis(0), &views).expect("same widths")
}

struct SampleGraph {
    tape: Tape,
    z: NodeId,
    aux_losses: Vec<(NodeId, f64)>,
}

fn train_batch(
    model: &mut TextStyleModel,
    adam: &mut Adam,
    lexicon: &EmotionLexicon,
    corpus: &[String],
    batch: &[usize],
    phase: usize,
    cfg: &Config,
    step: u64,
) -> Result<f64> {
    let b = batch.len();
    if b < 2 {
        return Err(Error::ContrastiveBatchTooSmall(b));
    }
    // Originals then positives, so row i pairs with row i + B.
    let texts: Vec<String> = batch
        .iter()
        .map(|&i| corpus[i].clone())
        .chain(batch.iter().enumerate().map(|(bi, &i)| {
            let seed = cfg.seed ^ step.wrapping_mul(0x9E37_79B9) ^ (bi as u64) << 17;
            augment_positive(lexicon, &corpus[i], seed).0
        }))
        .collect();

    // Per-sample forward passes (parallel, order-stable).
    let mut graphs: Vec<SampleGraph> = par::par_map(&texts, |text| {
        let mut tape = Tape::new();
        let mut f = Fwd::new(&mut tape, &model.store);
        let (z, pooled) = model.encode_nodes(&mut f, text);
        let mut aux = Vec::new();
        if phase == 2 {
            if let Some(pooled) = pooled {
                let h_rec = model.proj_dec.forward(&mut f, z);
                let recon = f.tape.mse(h_rec, pooled);
                aux.push((recon, cfg.recon_weight / (2 * b) as f64));
            }
        }
        SampleGraph { tape, z, aux_losses: aux }
    });

    // Batch-level contrastive loss over the collected embeddings.
    let embeddings: Vec<Array2<f64>> = graphs.iter().map(|g| to2(g.tape.value(g.z))).collect();
    let (contrastive, z_grads) = contrastive_batch(&embeddings, cfg.temperature)?;
    let mut total = contrastive;

    // Clustering loss (phase 2): targets detached per batch.
    if phase == 2 {
        let views: Vec<_> = embeddings.iter().map(|e| e.view()).collect();
        let stacked = ndarray::concatenate(ndarray::Axis(0), &views).expect("widths");
        let centroids = to2(model.store.value(model.centroids));
        let q = soft_assignments(&stacked, &centroids);
        let p = target_distribution(&q);
        for (i, g) in graphs.iter_mut().enumerate() {
            let mut f = Fwd::new(&mut g.tape, &model.store);
            let mu = f.leaf(model.centroids);
            let zz = f.tape.row_sum_sq(g.z);
            let mm = f.tape.row_sum_sq(mu);
            let mmr = f.tape.transpose(mm);
            let cross = f.tape.matmul_nt(g.z, mu);
            let cross2 = f.tape.scale(cross, -2.0);
            let d2 = f.tape.outer_add(zz, mmr);
            let d2 = f.tape.add(d2, cross2);
            let shifted = f.tape.shift(d2, 1.0);
            let qun = f.tape.reciprocal(shifted);
            let qrow = f.tape.row_normalize(qun);
            let logq = f.tape.log_floor(qrow, 1e-12);
            let prow = f.tape.constant(p.row(i).to_owned().insert_axis(ndarray::Axis(0)).into_dyn());
            let ce = f.tape.mul(logq, prow);
            let ce_sum = f.tape.sum_all(ce);
            let cluster = f.tape.scale(ce_sum, -1.0);
            g.aux_losses.push((cluster, cfg.cluster_weight / (2 * b) as f64));
        }
    }

    // Backward per sample, seeded by the contrastive gradient plus any
    // tape-local losses; reduce in order.
    let grad_parts: Vec<(GradStore, f64)> = par::par_map_range(graphs.len(), |i| {
        let g = &graphs[i];
        let one = ArrayD::from_elem(IxDyn(&[1, 1]), 1.0);
        let mut seeds = vec![(g.z, z_grads[i].clone().into_dyn())];
        let mut aux_total = 0.0;
        for &(node, w) in &g.aux_losses {
            seeds.push((node, &one * w));
            aux_total += g.tape.scalar(node) * w;
        }
        let mut grads = GradStore::new(&model.store);
        g.tape.backward_seeded(&seeds, &mut grads);
        (grads, aux_total)
    });

    let mut merged = GradStore::new(&model.store);
    for (g, aux) in &grad_parts {
        merged.merge(g);
        total += aux;
    }
    adam.apply(&mut model.store, &merged);
    Ok(total)
}
