//! Three-stage training orchestration.
//!
//! Stage i pre-trains the text style encoder on plain text; stage ii
//! pre-trains the VQ-VAE style extractor on audio; stage iii trains the TTS
//! model with both teachers frozen. Stages are a strict DAG: each later
//! stage refuses to run without the earlier checkpoints. Runs are seeded and
//! resumable; every run directory gets a loss log and a `run.json`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::acoustic::{AcousticModel, LossValues, Targets, TtsItem};
use crate::config::{Ablation, Config};
use crate::corpus::{cache_path, phoneme_level_targets, read_feature_record, FeatureStats, Manifest, Split};
use crate::error::{Error, Result};
use crate::nn::optim::Adam;
use crate::nn::params::GradStore;
pub use crate::nn::params::verify_frozen;
use crate::par;
use crate::style_extractor::{pretrain_style_extractor, StyleExtractorModel};
use crate::text_style::{pretrain_style_encoder, EmotionLexicon, TextStyleModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    TextStyle,
    StyleExtractor,
    Tts,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::TextStyle => "text_style",
            Stage::StyleExtractor => "style_extractor",
            Stage::Tts => "tts",
        }
    }
}

/// Component names stage iii must freeze, always.
pub fn mandatory_freezes() -> Vec<String> {
    vec!["text_style".to_string(), "style_extractor".to_string()]
}

/// Everything a stage might need on disk.
#[derive(Debug, Clone, Default)]
pub struct StageInputs {
    pub text_corpus: Option<PathBuf>,
    pub lexicon: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub text_ckpt: Option<PathBuf>,
    pub extractor_ckpt: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub stage: String,
    pub config_hash: String,
    pub checkpoints: Vec<String>,
    pub best_checkpoint: Option<String>,
    pub loss_log: String,
}

impl RunManifest {
    pub fn write(&self, out_dir: &Path) -> Result<()> {
        std::fs::write(out_dir.join("run.json"), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

fn require(path: &Option<PathBuf>, what: &str, stage: Stage) -> Result<PathBuf> {
    match path {
        Some(p) if p.exists() => Ok(p.clone()),
        Some(p) => Err(Error::StageOrderViolation(format!(
            "stage {} needs {what} at {}, which does not exist",
            stage.name(),
            p.display()
        ))),
        None => Err(Error::StageOrderViolation(format!("stage {} needs {what}", stage.name()))),
    }
}

/// Run one training stage end to end, writing checkpoints, a loss log and
/// `run.json` into `out_dir`.
pub fn run_stage(stage: Stage, cfg: &Config, inputs: &StageInputs, out_dir: &Path, resume: bool) -> Result<RunManifest> {
    std::fs::create_dir_all(out_dir)?;
    match stage {
        Stage::TextStyle => run_stage_text(cfg, inputs, out_dir),
        Stage::StyleExtractor => run_stage_extractor(cfg, inputs, out_dir),
        Stage::Tts => run_stage_tts(cfg, inputs, out_dir, resume),
    }
}

fn run_stage_text(cfg: &Config, inputs: &StageInputs, out_dir: &Path) -> Result<RunManifest> {
    let corpus_path = require(&inputs.text_corpus, "a plain-text corpus", Stage::TextStyle)?;
    let lexicon_path = require(&inputs.lexicon, "an emotion lexicon", Stage::TextStyle)?;
    let corpus: Vec<String> = std::fs::read_to_string(&corpus_path)?
        .lines()
        .map(str::to_string)
        .filter(|l| !l.trim().is_empty())
        .collect();
    let lexicon = EmotionLexicon::load(&lexicon_path)?;
    let (mut model, _report) = pretrain_style_encoder(&corpus, &lexicon, cfg, Some(out_dir))?;
    model.frozen = true;
    let ckpt = out_dir.join("text_style.bvck");
    model.save(&ckpt)?;
    let run = RunManifest {
        stage: Stage::TextStyle.name().into(),
        config_hash: cfg.hash(),
        checkpoints: vec![ckpt.display().to_string()],
        best_checkpoint: Some(ckpt.display().to_string()),
        loss_log: out_dir.join("text_loss_log.csv").display().to_string(),
    };
    run.write(out_dir)?;
    Ok(run)
}

fn run_stage_extractor(cfg: &Config, inputs: &StageInputs, out_dir: &Path) -> Result<RunManifest> {
    let manifest_path = require(&inputs.manifest, "a prepared manifest", Stage::StyleExtractor)?;
    let text_ckpt = require(&inputs.text_ckpt, "the stage-i checkpoint", Stage::StyleExtractor)?;
    let manifest = Manifest::read_jsonl(&manifest_path)?;
    let prep_dir = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let text_model = TextStyleModel::load(&text_ckpt)?;
    let (mut model, _report) =
        pretrain_style_extractor(&manifest, &prep_dir, &text_model, cfg, Some(out_dir))?;
    model.frozen = true;
    let ckpt = out_dir.join("style_extractor.bvck");
    model.save(&ckpt)?;
    let run = RunManifest {
        stage: Stage::StyleExtractor.name().into(),
        config_hash: cfg.hash(),
        checkpoints: vec![ckpt.display().to_string()],
        best_checkpoint: Some(ckpt.display().to_string()),
        loss_log: out_dir.join("extractor_loss_log.csv").display().to_string(),
    };
    run.write(out_dir)?;
    Ok(run)
}

/// Assemble every per-record training input the TTS stage consumes,
/// including the frozen teachers' outputs.
pub fn build_tts_items(
    manifest: &Manifest,
    prep_dir: &Path,
    text_model: Option<&TextStyleModel>,
    extractor: Option<&StyleExtractorModel>,
    cfg: &Config,
    split: Split,
) -> Result<Vec<TtsItem>> {
    if let Some(t) = text_model {
        if !t.frozen {
            return Err(Error::FrozenContractViolation(
                "text style encoder must be frozen for stage iii".into(),
            ));
        }
    }
    if let Some(e) = extractor {
        if !e.frozen {
            return Err(Error::FrozenContractViolation(
                "style extractor must be frozen for stage iii".into(),
            ));
        }
    }
    let stats = FeatureStats::load(&prep_dir.join("stats.json"))?;
    let cache_dir = prep_dir.join("cache");
    let indices = manifest.split_indices(split);
    let items: Vec<Result<TtsItem>> = par::par_map(&indices, |&i| {
        let rec = &manifest.records[i];
        let feats = read_feature_record(&cache_path(&cache_dir, &rec.id))?;
        let f0n = stats.norm_f0(&feats.f0, &rec.speaker_id);
        let enn = stats.norm_energy(&feats.energy, &rec.speaker_id);
        let (pitch, energy) = phoneme_level_targets(&f0n, &enn, &rec.durations);
        let phoneme_ids = manifest.phoneme_ids(&rec.phonemes)?;
        let d_style = cfg.d_style;
        let (h_s, h_cs) = match text_model {
            Some(t) => {
                let window = manifest.build_context_window(&rec.id, cfg.context_k)?;
                (t.encode_style(&rec.text), t.encode_context(&window)?)
            }
            None => (
                ndarray::Array2::zeros((1, d_style)),
                ndarray::Array2::zeros((2 * cfg.context_k + 1, d_style)),
            ),
        };
        let h_se = match extractor {
            Some(e) => Some(e.extract_style(&feats.mel20, &f0n, &enn, &h_s)?),
            None => None,
        };
        Ok(TtsItem {
            phoneme_ids,
            targets: Targets { durations: rec.durations.clone(), pitch, energy },
            mel: feats.mel,
            h_s,
            h_cs,
            h_se,
        })
    });
    items.into_iter().collect()
}

/// Stage-iii trainer with step-level control (used by the pipeline and
/// directly by tests).
pub struct TtsTrainer {
    pub model: AcousticModel,
    pub adam: Adam,
    pub items: Vec<TtsItem>,
    pub val_items: Vec<TtsItem>,
    pub cfg: Config,
    pub step: u64,
}

impl TtsTrainer {
    pub fn new(model: AcousticModel, items: Vec<TtsItem>, val_items: Vec<TtsItem>, cfg: &Config) -> TtsTrainer {
        let adam = Adam::new(
            &model.store,
            cfg.learning_rate,
            cfg.adam_beta1,
            cfg.adam_beta2,
            cfg.adam_eps,
            cfg.warmup_steps,
        );
        TtsTrainer { model, adam, items, val_items, cfg: cfg.clone(), step: 0 }
    }

    pub fn batch_order(&self, epoch: usize) -> Vec<usize> {
        use rand::{Rng, SeedableRng};
        let mut order: Vec<usize> = (0..self.items.len()).collect();
        let mut rng =
            rand_chacha::ChaCha8Rng::seed_from_u64(self.cfg.seed ^ 0x7715 ^ ((epoch as u64) << 16));
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        order
    }

    /// One optimizer step over a batch of item indices.
    pub fn step_batch(&mut self, batch: &[usize]) -> Result<LossValues> {
        let scale = 1.0 / batch.len() as f64;
        let parts: Vec<Result<(GradStore, LossValues)>> = par::par_map(batch, |&i| {
            let graph = self.model.forward_train(&self.items[i])?;
            let mut grads = GradStore::new(&self.model.store);
            let seed = ArrayD::from_elem(IxDyn(&[1, 1]), scale);
            graph.tape.backward_seeded(&[(graph.losses.total, seed)], &mut grads);
            Ok((grads, graph.values()))
        });
        let mut merged = GradStore::new(&self.model.store);
        let mut sum = LossValues { mel: 0.0, dur: 0.0, pitch: 0.0, energy: 0.0, style: 0.0, l_tts: 0.0, total: 0.0 };
        for part in parts {
            let (g, v) = part?;
            merged.merge(&g);
            sum.mel += v.mel * scale;
            sum.dur += v.dur * scale;
            sum.pitch += v.pitch * scale;
            sum.energy += v.energy * scale;
            sum.style += v.style * scale;
            sum.l_tts += v.l_tts * scale;
            sum.total += v.total * scale;
        }
        self.adam.apply(&mut self.model.store, &merged);
        self.step += 1;
        Ok(sum)
    }

    pub fn validation_loss(&self) -> Result<f64> {
        if self.val_items.is_empty() {
            return Ok(f64::NAN);
        }
        let losses: Vec<Result<f64>> = par::par_map(&self.val_items, |item| {
            Ok(self.model.forward_train(item)?.values().total)
        });
        let mut total = 0.0;
        for l in losses {
            total += l?;
        }
        Ok(total / self.val_items.len() as f64)
    }
}

#[derive(Serialize, Deserialize)]
struct ResumeInfo {
    next_epoch: usize,
    step: u64,
}

fn run_stage_tts(cfg: &Config, inputs: &StageInputs, out_dir: &Path, resume: bool) -> Result<RunManifest> {
    let ablation = cfg.ablation;
    let manifest_path = require(&inputs.manifest, "a prepared manifest", Stage::Tts)?;
    let text_ckpt = match ablation {
        Ablation::NoStyleEncoder => None,
        _ => Some(require(&inputs.text_ckpt, "the stage-i checkpoint", Stage::Tts)?),
    };
    let extractor_ckpt = match ablation {
        Ablation::NoStyleExtractor | Ablation::NoStyleDecoder => None,
        _ => Some(require(&inputs.extractor_ckpt, "the stage-ii checkpoint", Stage::Tts)?),
    };

    let manifest = Manifest::read_jsonl(&manifest_path)?;
    let prep_dir = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let text_model = text_ckpt.as_deref().map(TextStyleModel::load).transpose()?;
    let extractor = extractor_ckpt.as_deref().map(StyleExtractorModel::load).transpose()?;

    // Freeze contract: record the teachers' bytes before any step.
    let mut before = BTreeMap::new();
    if let Some(t) = &text_model {
        before.insert("text_style".to_string(), t.checksum());
    }
    if let Some(e) = &extractor {
        before.insert("style_extractor".to_string(), e.checksum());
    }

    let items = build_tts_items(&manifest, &prep_dir, text_model.as_ref(), extractor.as_ref(), cfg, Split::Train)?;
    if items.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let val_items =
        build_tts_items(&manifest, &prep_dir, text_model.as_ref(), extractor.as_ref(), cfg, Split::Val)?;
    let model = AcousticModel::new(cfg, ablation, manifest.phoneme_inventory.clone(), cfg.seed ^ 0xACC)?;
    let mut trainer = TtsTrainer::new(model, items, val_items, cfg);

    let log_path = out_dir.join("tts_loss_log.csv");
    let last_path = out_dir.join("last.bvck");
    let best_path = out_dir.join("best.bvck");
    let final_path = out_dir.join("tts.bvck");

    let mut start_epoch = 0usize;
    let mut log_lines: Vec<String> = Vec::new();
    if resume && last_path.exists() {
        let ck = crate::checkpoint::load(&last_path)?;
        ck.expect_component(crate::acoustic::COMPONENT)?;
        ck.apply_to(&mut trainer.model.store)?;
        if let Some(opt) = ck.optimizer {
            trainer.adam.restore(opt.m, opt.v, opt.step);
            trainer.step = opt.step;
        }
        let info: ResumeInfo = serde_json::from_value(ck.extra["resume"].clone())?;
        start_epoch = info.next_epoch;
        // Keep only log lines at or before the checkpointed step.
        if log_path.exists() {
            for line in std::fs::read_to_string(&log_path)?.lines() {
                if line.starts_with("step,") {
                    log_lines.push(line.to_string());
                    continue;
                }
                if let Some(s) = line.split(',').next().and_then(|s| s.parse::<u64>().ok()) {
                    if s <= info.step {
                        log_lines.push(line.to_string());
                    }
                }
            }
        }
    }
    if log_lines.is_empty() {
        log_lines.push("step,epoch,mel,dur,pitch,energy,style,total".to_string());
    }

    let mut best_val = f64::INFINITY;
    let mut checkpoints = Vec::new();
    'epochs: for epoch in start_epoch..cfg.tts_epochs {
        let order = trainer.batch_order(epoch);
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let v = trainer.step_batch(batch)?;
            log_lines.push(format!(
                "{},{},{},{},{},{},{},{}",
                trainer.step, epoch, v.mel, v.dur, v.pitch, v.energy, v.style, v.total
            ));
            if cfg.max_steps > 0 && trainer.step >= cfg.max_steps {
                save_tts(&trainer, cfg, &last_path, epoch + 1)?;
                break 'epochs;
            }
        }
        save_tts(&trainer, cfg, &last_path, epoch + 1)?;
        let val = trainer.validation_loss()?;
        if val.is_finite() && val < best_val {
            best_val = val;
            trainer.model.save(&best_path)?;
        }
    }
    write_lines(&log_path, &log_lines)?;
    trainer.model.save(&final_path)?;
    checkpoints.push(final_path.display().to_string());
    checkpoints.push(last_path.display().to_string());
    if best_path.exists() {
        checkpoints.push(best_path.display().to_string());
    }

    // Teachers must be byte-identical after training.
    let mut after = BTreeMap::new();
    if let Some(t) = &text_model {
        after.insert("text_style".to_string(), t.checksum());
    }
    if let Some(e) = &extractor {
        after.insert("style_extractor".to_string(), e.checksum());
    }
    let frozen: Vec<String> = before.keys().cloned().collect();
    let violations = verify_frozen(&before, &after, &frozen)?;
    if !violations.is_empty() {
        return Err(Error::FrozenContractViolation(violations.join(", ")));
    }

    let run = RunManifest {
        stage: Stage::Tts.name().into(),
        config_hash: cfg.hash(),
        checkpoints,
        best_checkpoint: best_path.exists().then(|| best_path.display().to_string()),
        loss_log: log_path.display().to_string(),
    };
    run.write(out_dir)?;
    Ok(run)
}

fn save_tts(trainer: &TtsTrainer, cfg: &Config, path: &Path, next_epoch: usize) -> Result<()> {
    let extra = serde_json::json!({
        "phoneme_inventory": trainer.model.phoneme_inventory,
        "ablation": trainer.model.ablation,
        "frozen": false,
        "resume": ResumeInfo { next_epoch, step: trainer.step },
    });
    crate::checkpoint::save(path, crate::acoustic::COMPONENT, cfg, &trainer.model.store, extra, Some(&trainer.adam))
}

fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for line in lines {
        writeln!(f, "{line}")?;
    }
    f.flush()?;
    Ok(())
}
