//! Corpus ingestion: the utterance manifest, duration alignment, context
//! windows, the binary feature cache, and normalization statistics.

use std::collections::BTreeMap;
use std::io::{BufRead, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::audio::features::{extract_features, AcousticFeatures};
use crate::audio::wav;
use crate::config::{Config, NormScope};
use crate::error::{Error, Result};
use crate::par;

/// Sentinel for context slots that fall off a document boundary.
pub const NULL_CONTEXT: &str = "";

pub const CACHE_MAGIC: &[u8; 4] = b"STYB";
pub const CACHE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Val,
    Test,
}

/// One corpus item, as stored per line in `manifest.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub id: String,
    pub text: String,
    pub phonemes: Vec<String>,
    pub durations: Vec<u32>,
    pub context_ids: Vec<String>,
    pub speaker_id: String,
    pub audio_path: String,
    #[serde(default)]
    pub split: Split,
}

impl UtteranceRecord {
    pub fn total_frames(&self) -> usize {
        self.durations.iter().map(|&d| d as usize).sum()
    }
}

#[derive(Debug, Clone)]
pub struct Manifest {
    pub records: Vec<UtteranceRecord>,
    index: BTreeMap<String, usize>,
    pub speakers: Vec<String>,
    pub phoneme_inventory: Vec<String>,
}

impl Manifest {
    pub fn new(records: Vec<UtteranceRecord>) -> Result<Manifest> {
        if records.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut index = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            if r.durations.len() != r.phonemes.len() {
                return Err(Error::ShapeMismatch(format!(
                    "record {}: {} durations for {} phonemes",
                    r.id,
                    r.durations.len(),
                    r.phonemes.len()
                )));
            }
            if r.context_ids.len() % 2 == 0 {
                return Err(Error::BadWindow(r.context_ids.len()));
            }
            let mid = r.context_ids.len() / 2;
            if r.context_ids[mid] != r.id {
                return Err(Error::ShapeMismatch(format!(
                    "record {}: context window center is `{}`",
                    r.id, r.context_ids[mid]
                )));
            }
            if index.insert(r.id.clone(), i).is_some() {
                return Err(Error::ShapeMismatch(format!("duplicate utterance id {}", r.id)));
            }
        }
        for r in &records {
            for cid in &r.context_ids {
                if cid != NULL_CONTEXT && !index.contains_key(cid) {
                    return Err(Error::UnknownUtterance(cid.clone()));
                }
            }
        }
        // Stable global inventories: sorted and deduplicated.
        let mut speakers: Vec<String> = records.iter().map(|r| r.speaker_id.clone()).collect();
        speakers.sort();
        speakers.dedup();
        let mut phons: Vec<String> = records.iter().flat_map(|r| r.phonemes.clone()).collect();
        phons.sort();
        phons.dedup();
        Ok(Manifest { records, index, speakers, phoneme_inventory: phons })
    }

    pub fn get(&self, id: &str) -> Option<&UtteranceRecord> {
        self.index.get(id).map(|&i| &self.records[i])
    }

    pub fn speaker_index(&self, speaker: &str) -> Option<usize> {
        self.speakers.binary_search_by(|s| s.as_str().cmp(speaker)).ok()
    }

    pub fn phoneme_ids(&self, phonemes: &[String]) -> Result<Vec<usize>> {
        phonemes
            .iter()
            .map(|p| {
                self.phoneme_inventory
                    .binary_search_by(|q| q.as_str().cmp(p))
                    .map_err(|_| Error::UnknownPhoneme(p.clone()))
            })
            .collect()
    }

    /// Texts of the `2k+1` window centered on `id`, in document order,
    /// with the empty string at positions beyond the document edge.
    pub fn build_context_window(&self, id: &str, k: usize) -> Result<Vec<String>> {
        let rec = self.get(id).ok_or_else(|| Error::UnknownUtterance(id.to_string()))?;
        let stored_k = rec.context_ids.len() / 2;
        if k > stored_k {
            return Err(Error::Config(format!(
                "window k={k} exceeds the k={stored_k} captured in the manifest"
            )));
        }
        let mid = rec.context_ids.len() / 2;
        Ok(rec.context_ids[mid - k..=mid + k]
            .iter()
            .map(|cid| {
                if cid == NULL_CONTEXT {
                    String::new()
                } else {
                    self.get(cid).map(|r| r.text.clone()).unwrap_or_default()
                }
            })
            .collect())
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(std::fs::File::create(path)?);
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Manifest> {
        let file = std::fs::File::open(path)?;
        let reader = std::io::BufReader::new(file);
        let mut records = Vec::new();
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line)?);
        }
        Manifest::new(records)
    }
}

/// Reconcile aligner durations with the feature frame count: differences up
/// to `tolerance` frames are absorbed by the last nonzero duration (walking
/// further back if that entry cannot absorb the whole correction).
pub fn align_durations(durations: &[u32], frames: usize, tolerance: i64) -> Result<Vec<u32>> {
    let sum: i64 = durations.iter().map(|&d| d as i64).sum();
    let mut diff = frames as i64 - sum;
    if diff.abs() > tolerance {
        return Err(Error::AlignmentMismatch { sum, frames: frames as i64, tolerance });
    }
    let mut out: Vec<u32> = durations.to_vec();
    if diff == 0 {
        return Ok(out);
    }
    for d in out.iter_mut().rev() {
        if *d == 0 {
            continue;
        }
        let take = if diff > 0 { diff } else { diff.max(-(*d as i64 - 1)) };
        *d = (*d as i64 + take) as u32;
        diff -= take;
        if diff == 0 {
            break;
        }
    }
    if diff != 0 {
        return Err(Error::AlignmentMismatch { sum, frames: frames as i64, tolerance });
    }
    Ok(out)
}

/// Spread `frames` evenly over `n` phonemes (fallback when no alignment is
/// available); earlier phonemes absorb the remainder.
pub fn uniform_durations(frames: usize, n: usize) -> Vec<u32> {
    let base = frames / n;
    let rem = frames % n;
    (0..n).map(|i| (base + usize::from(i < rem)) as u32).collect()
}

// ---- feature cache -------------------------------------------------------

/// Write one binary feature record: 16-byte header (magic, version, T,
/// n_mels) then mel, f0, energy as little-endian f32.
pub fn write_feature_record(path: &Path, feats: &AcousticFeatures) -> Result<()> {
    let t = feats.frames();
    let n_mels = feats.mel.ncols();
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    out.write_all(CACHE_MAGIC)?;
    out.write_all(&CACHE_VERSION.to_le_bytes())?;
    out.write_all(&(t as u32).to_le_bytes())?;
    out.write_all(&(n_mels as u32).to_le_bytes())?;
    for v in feats.mel.iter() {
        out.write_all(&(*v as f32).to_le_bytes())?;
    }
    for v in &feats.f0 {
        out.write_all(&(*v as f32).to_le_bytes())?;
    }
    for v in &feats.energy {
        out.write_all(&(*v as f32).to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_feature_record(path: &Path) -> Result<AcousticFeatures> {
    let mut file = std::fs::File::open(path)?;
    let mut header = [0u8; 16];
    file.read_exact(&mut header)?;
    if &header[0..4] != CACHE_MAGIC {
        return Err(Error::Checkpoint(format!("{}: bad cache magic", path.display())));
    }
    let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if version != CACHE_VERSION {
        return Err(Error::Checkpoint(format!("{}: cache version {version}", path.display())));
    }
    let t = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let n_mels = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
    let mut body = Vec::new();
    file.read_to_end(&mut body)?;
    let need = (t * n_mels + 2 * t) * 4;
    if body.len() != need {
        return Err(Error::Checkpoint(format!(
            "{}: expected {need} payload bytes, got {}",
            path.display(),
            body.len()
        )));
    }
    let mut vals = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64);
    let mel = Array2::from_shape_vec((t, n_mels), vals.by_ref().take(t * n_mels).collect())
        .expect("mel shape");
    let f0: Vec<f64> = vals.by_ref().take(t).collect();
    let energy: Vec<f64> = vals.take(t).collect();
    let mel20 = AcousticFeatures::slice_mel20(&mel);
    Ok(AcousticFeatures { mel, f0, energy, mel20 })
}

pub fn cache_path(cache_dir: &Path, id: &str) -> PathBuf {
    cache_dir.join(format!("{id}.styb"))
}

// ---- normalization stats ---------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    fn from_values(values: &[f64]) -> MeanStd {
        if values.is_empty() {
            return MeanStd { mean: 0.0, std: 1.0 };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        MeanStd { mean, std: var.sqrt().max(1e-8) }
    }

    pub fn norm(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }

    pub fn denorm(&self, v: f64) -> f64 {
        v * self.std + self.mean
    }
}

/// Z-score statistics for F0 (voiced frames only) and energy, global plus
/// per speaker.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct FeatureStats {
    pub f0: MeanStd,
    pub energy: MeanStd,
    pub per_speaker: BTreeMap<String, (MeanStd, MeanStd)>,
    pub scope: Option<String>,
}

impl FeatureStats {
    pub fn compute(items: &[(&str, &AcousticFeatures)], scope: NormScope) -> FeatureStats {
        let mut all_f0 = Vec::new();
        let mut all_energy = Vec::new();
        let mut by_speaker: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for (speaker, feats) in items {
            let entry = by_speaker.entry(speaker.to_string()).or_default();
            for &v in feats.f0.iter().filter(|&&v| v > 0.0) {
                all_f0.push(v);
                entry.0.push(v);
            }
            for &e in &feats.energy {
                all_energy.push(e);
                entry.1.push(e);
            }
        }
        let per_speaker = by_speaker
            .into_iter()
            .map(|(s, (f, e))| (s, (MeanStd::from_values(&f), MeanStd::from_values(&e))))
            .collect();
        FeatureStats {
            f0: MeanStd::from_values(&all_f0),
            energy: MeanStd::from_values(&all_energy),
            per_speaker,
            scope: Some(match scope {
                NormScope::Global => "global".into(),
                NormScope::Speaker => "speaker".into(),
            }),
        }
    }

    fn pick(&self, speaker: &str) -> (&MeanStd, &MeanStd) {
        if self.scope.as_deref() == Some("speaker") {
            if let Some((f, e)) = self.per_speaker.get(speaker) {
                return (f, e);
            }
        }
        (&self.f0, &self.energy)
    }

    /// Normalize F0: voiced frames are z-scored, unvoiced stay exactly 0.
    pub fn norm_f0(&self, f0: &[f64], speaker: &str) -> Vec<f64> {
        let (fs, _) = self.pick(speaker);
        f0.iter().map(|&v| if v > 0.0 { fs.norm(v) } else { 0.0 }).collect()
    }

    pub fn norm_energy(&self, energy: &[f64], speaker: &str) -> Vec<f64> {
        let (_, es) = self.pick(speaker);
        energy.iter().map(|&v| es.norm(v)).collect()
    }

    pub fn denorm_f0(&self, v: f64, speaker: &str) -> f64 {
        self.pick(speaker).0.denorm(v)
    }

    pub fn denorm_energy(&self, v: f64, speaker: &str) -> f64 {
        self.pick(speaker).1.denorm(v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<FeatureStats> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Phoneme-level pitch/energy targets: the mean of the normalized frame
/// tracks over each phoneme's span (pitch over voiced frames only).
pub fn phoneme_level_targets(
    f0_norm: &[f64],
    energy_norm: &[f64],
    durations: &[u32],
) -> (Vec<f64>, Vec<f64>) {
    let mut pitch = Vec::with_capacity(durations.len());
    let mut energy = Vec::with_capacity(durations.len());
    let mut t = 0usize;
    for &d in durations {
        let span = t..t + d as usize;
        let voiced: Vec<f64> = span.clone().map(|i| f0_norm[i]).filter(|&v| v != 0.0).collect();
        pitch.push(if voiced.is_empty() { 0.0 } else { voiced.iter().sum::<f64>() / voiced.len() as f64 });
        let evals: Vec<f64> = span.map(|i| energy_norm[i]).collect();
        energy.push(if evals.is_empty() { 0.0 } else { evals.iter().sum::<f64>() / evals.len() as f64 });
        t += d as usize;
    }
    (pitch, energy)
}

// ---- corpus preparation ------------------------------------------------------

/// One row of `transcripts.jsonl` in a raw corpus directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TranscriptRow {
    pub id: String,
    pub text: String,
    pub phonemes: Vec<String>,
    pub speaker_id: String,
    #[serde(default)]
    pub chapter: String,
    #[serde(default)]
    pub split: Split,
    #[serde(default)]
    pub durations: Option<Vec<u32>>,
}

#[derive(Debug)]
pub struct PrepSummary {
    pub manifest_path: PathBuf,
    pub cache_dir: PathBuf,
    pub stats_path: PathBuf,
    pub records: usize,
}

/// Ingest a raw corpus directory (`transcripts.jsonl` + `wav/<id>.wav`,
/// optional `alignments.jsonl`) into a prepared directory with a manifest,
/// feature cache and normalization stats.
pub fn prepare_corpus(corpus_dir: &Path, out_dir: &Path, cfg: &Config) -> Result<PrepSummary> {
    let rows = read_transcripts(&corpus_dir.join("transcripts.jsonl"))?;
    if rows.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let alignments = read_alignments(&corpus_dir.join("alignments.jsonl"))?;

    std::fs::create_dir_all(out_dir)?;
    let cache_dir = out_dir.join("cache");
    std::fs::create_dir_all(&cache_dir)?;

    // Feature extraction is pure per utterance; fan out.
    let feats: Vec<Result<(AcousticFeatures, Vec<u32>)>> = par::par_map(&rows, |row| {
        let wav_path = corpus_dir.join("wav").join(format!("{}.wav", row.id));
        let (audio, sr) = wav::read_wav_mono(&wav_path)?;
        let f = extract_features(&audio, sr, cfg)?;
        let raw = match alignments.get(&row.id).cloned().or_else(|| row.durations.clone()) {
            Some(d) => d,
            None => uniform_durations(f.frames(), row.phonemes.len().max(1)),
        };
        let aligned = align_durations(&raw, f.frames(), cfg.duration_tolerance)?;
        Ok((f, aligned))
    });

    // Context windows follow document order within each chapter.
    let k = cfg.context_k;
    let mut chapter_members: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, row) in rows.iter().enumerate() {
        chapter_members.entry(row.chapter.as_str()).or_default().push(i);
    }
    let mut context_ids: Vec<Vec<String>> = vec![Vec::new(); rows.len()];
    for members in chapter_members.values() {
        for (pos, &i) in members.iter().enumerate() {
            let mut window = Vec::with_capacity(2 * k + 1);
            for off in -(k as isize)..=(k as isize) {
                let j = pos as isize + off;
                if j < 0 || j >= members.len() as isize {
                    window.push(NULL_CONTEXT.to_string());
                } else {
                    window.push(rows[members[j as usize]].id.clone());
                }
            }
            context_ids[i] = window;
        }
    }

    let mut records = Vec::with_capacity(rows.len());
    let mut stats_items: Vec<(String, AcousticFeatures)> = Vec::new();
    for ((row, feat), ctx) in rows.iter().zip(feats).zip(context_ids) {
        let (f, durations) = feat?;
        write_feature_record(&cache_path(&cache_dir, &row.id), &f)?;
        if row.split == Split::Train {
            stats_items.push((row.speaker_id.clone(), f));
        }
        records.push(UtteranceRecord {
            id: row.id.clone(),
            text: row.text.clone(),
            phonemes: row.phonemes.clone(),
            durations,
            context_ids: ctx,
            speaker_id: row.speaker_id.clone(),
            audio_path: format!("wav/{}.wav", row.id),
            split: row.split,
        });
    }

    let manifest = Manifest::new(records)?;
    let manifest_path = out_dir.join("manifest.jsonl");
    manifest.write_jsonl(&manifest_path)?;

    let borrowed: Vec<(&str, &AcousticFeatures)> =
        stats_items.iter().map(|(s, f)| (s.as_str(), f)).collect();
    let stats = FeatureStats::compute(&borrowed, cfg.norm_scope);
    let stats_path = out_dir.join("stats.json");
    stats.save(&stats_path)?;

    Ok(PrepSummary { manifest_path, cache_dir, stats_path, records: manifest.records.len() })
}

fn read_transcripts(path: &Path) -> Result<Vec<TranscriptRow>> {
    let file = std::fs::File::open(path)?;
    let mut rows = Vec::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(&line)?);
    }
    Ok(rows)
}

fn read_alignments(path: &Path) -> Result<BTreeMap<String, Vec<u32>>> {
    #[derive(Deserialize)]
    struct Row {
        id: String,
        durations: Vec<u32>,
    }
    let mut map = BTreeMap::new();
    if !path.exists() {
        return Ok(map);
    }
    let file = std::fs::File::open(path)?;
    for line in std::io::BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: Row = serde_json::from_str(&line)?;
        map.insert(row.id, row.durations);
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, ctx: Vec<&str>) -> UtteranceRecord {
        UtteranceRecord {
            id: id.into(),
            text: format!("text of {id}"),
            phonemes: vec!["a".into(), "b".into()],
            durations: vec![2, 3],
            context_ids: ctx.into_iter().map(String::from).collect(),
            speaker_id: "spk0".into(),
            audio_path: format!("wav/{id}.wav"),
            split: Split::Train,
        }
    }

    fn small_manifest() -> Manifest {
        Manifest::new(vec![
            record("u0", vec!["", "", "u0", "u1", "u2"]),
            record("u1", vec!["", "u0", "u1", "u2", ""]),
            record("u2", vec!["u0", "u1", "u2", "", ""]),
        ])
        .unwrap()
    }

    #[test]
    fn context_window_pads_boundaries() {
        let m = small_manifest();
        let w = m.build_context_window("u0", 2).unwrap();
        assert_eq!(w[0], "");
        assert_eq!(w[1], "");
        assert_eq!(w[2], "text of u0");
        assert_eq!(w[3], "text of u1");
        assert_eq!(w[4], "text of u2");
        assert_eq!(m.build_context_window("u1", 0).unwrap(), vec!["text of u1".to_string()]);
        let mid = m.build_context_window("u1", 2).unwrap();
        assert_eq!(mid[2], "text of u1");
        assert!(matches!(m.build_context_window("zz", 2), Err(Error::UnknownUtterance(_))));
    }

    #[test]
    fn align_durations_examples() {
        assert_eq!(align_durations(&[2, 1, 3], 6, 3).unwrap(), vec![2, 1, 3]);
        assert_eq!(align_durations(&[2, 1, 3], 7, 3).unwrap(), vec![2, 1, 4]);
        assert!(matches!(
            align_durations(&[2, 1, 3], 20, 3),
            Err(Error::AlignmentMismatch { .. })
        ));
        // Correction lands on the last nonzero entry.
        assert_eq!(align_durations(&[2, 1, 3, 0], 7, 3).unwrap(), vec![2, 1, 4, 0]);
        assert_eq!(align_durations(&[2, 1, 3, 0], 4, 3).unwrap(), vec![2, 1, 1, 0]);
    }

    #[test]
    fn uniform_split_covers_total() {
        let d = uniform_durations(62, 5);
        assert_eq!(d.iter().sum::<u32>(), 62);
        assert_eq!(d.len(), 5);
        assert!(d.iter().all(|&x| x == 12 || x == 13));
    }

    #[test]
    fn manifest_round_trip_identical() {
        let m = small_manifest();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.jsonl");
        m.write_jsonl(&path).unwrap();
        let back = Manifest::read_jsonl(&path).unwrap();
        assert_eq!(m.records, back.records);
        assert_eq!(m.speakers, back.speakers);
        assert_eq!(m.phoneme_inventory, back.phoneme_inventory);
    }

    #[test]
    fn manifest_rejects_unresolvable_context() {
        let err = Manifest::new(vec![record("u0", vec!["", "ghost", "u0", "", ""])]);
        assert!(matches!(err, Err(Error::UnknownUtterance(_))));
    }

    #[test]
    fn cache_round_trip_f32_exact() {
        let cfg = Config::default();
        let audio: Vec<f64> = (0..16_000)
            .map(|i| (2.0 * std::f64::consts::PI * 200.0 * i as f64 / 16_000.0).sin() * 0.4)
            .collect();
        let f = extract_features(&audio, 16_000, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("u0.styb");
        write_feature_record(&path, &f).unwrap();
        let back = read_feature_record(&path).unwrap();
        assert_eq!(back.frames(), f.frames());
        // Values survive the f32 cache exactly as f32.
        for (a, b) in f.mel.iter().zip(back.mel.iter()) {
            assert_eq!(*a as f32, *b as f32);
        }
        for t in 0..back.frames() {
            for b in 0..20 {
                assert_eq!(back.mel20[[t, b]], back.mel[[t, b]]);
            }
        }
    }

    #[test]
    fn stats_normalize_voiced_only() {
        let cfg = Config::default();
        let audio: Vec<f64> = (0..16_000)
            .map(|i| (2.0 * std::f64::consts::PI * 150.0 * i as f64 / 16_000.0).sin() * 0.4)
            .collect();
        let f = extract_features(&audio, 16_000, &cfg).unwrap();
        let stats = FeatureStats::compute(&[("spk0", &f)], NormScope::Global);
        let mut f0 = f.f0.clone();
        f0[0] = 0.0;
        let n = stats.norm_f0(&f0, "spk0");
        assert_eq!(n[0], 0.0);
        let voiced: Vec<f64> = n.iter().copied().filter(|&v| v != 0.0).collect();
        assert!(voiced.iter().sum::<f64>().abs() / voiced.len() as f64 <= 1.0);
    }

    #[test]
    fn phoneme_targets_average_per_span() {
        let f0 = vec![0.0, 1.0, 1.0, 2.0, 2.0, 0.0];
        let en = vec![1.0, 1.0, 1.0, 3.0, 3.0, 3.0];
        let (p, e) = phoneme_level_targets(&f0, &en, &[3, 3]);
        assert_eq!(p, vec![1.0, 2.0]);
        assert_eq!(e, vec![1.0, 3.0]);
        let (p2, _) = phoneme_level_targets(&f0, &en, &[1, 5]);
        assert_eq!(p2[0], 0.0); // no voiced frame in span
    }
}
