//! Query-by-example testing of a trained checkpoint.
//!
//! Each held-out keyword is enrolled with seeded utterances; its remaining
//! utterances are positive trials, and every window of every negative
//! stream is a negative trial against every keyword.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use qbye_core::data::{ManifestRecord, Split, TrainingExample, Vocabulary};
use qbye_core::evaluation::{
    score_query, summarize, window_starts, DetCurve, EnrollmentSet, FaCounting, NegativeWindow,
    WINDOW_SAMPLES,
};
use qbye_core::model::KwsModel;
use qbye_core::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::EvalSection;
use crate::error::{AppError, AppResult};
use crate::frontend::{
    frame_count, read_wav, segment_features, AudioBuffer, LogMel, FRAME_SHIFT, SAMPLE_RATE,
};
use crate::manifest::{read_split, resolve_audio};
use crate::trainer::par_map;

pub const SCORES_FILE: &str = "scores.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";

pub fn det_file(counting: &FaCounting) -> String {
    format!("det-{}.json", counting.name())
}

/// One line of the score dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub trial: String,
    pub keyword: String,
    pub score: f64,
    pub label: TrialLabel,
    /// Window start in seconds for negative trials.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub time: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrialLabel {
    Positive,
    Negative,
}

/// A DET operating point; the leading `-inf` threshold is stored as `null`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TablePoint {
    pub threshold: Option<f64>,
    pub fa_per_hour: f64,
    pub frr: f64,
}

/// Exported DET curve for the plotting subcommand.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetTable {
    pub label: String,
    pub counting: String,
    pub negative_hours: f64,
    pub target_fa_per_hour: f64,
    pub frr_at_target: Option<f64>,
    pub points: Vec<TablePoint>,
}

impl DetTable {
    pub fn new(label: &str, curve: &DetCurve, target: f64, frr_at_target: Option<f64>) -> Self {
        DetTable {
            label: label.into(),
            counting: curve.counting.name().into(),
            negative_hours: curve.negative_hours,
            target_fa_per_hour: target,
            frr_at_target,
            points: curve
                .points
                .iter()
                .map(|p| TablePoint {
                    threshold: p.threshold.is_finite().then_some(p.threshold),
                    fa_per_hour: p.fa_per_hour,
                    frr: p.frr,
                })
                .collect(),
        }
    }

    pub fn load(path: &Path) -> AppResult<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| AppError::Data(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| AppError::Data(format!("{}: {e}", path.display())))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeResult {
    pub counting: String,
    pub frr_at_target: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub label: String,
    pub keywords: Vec<String>,
    pub target_fa_per_hour: f64,
    pub modes: Vec<ModeResult>,
    pub positive_trials: usize,
    pub negative_windows: usize,
    pub negative_hours: f64,
    /// Mean cosine similarity over same-word pairs of held-out embeddings.
    pub within_word_similarity: Option<f64>,
    pub cross_word_similarity: Option<f64>,
    /// Nearest speaker centroid (from training embeddings) accuracy on dev.
    pub speaker_probe_accuracy: Option<f64>,
    /// Accuracy of the trained speaker head on dev.
    pub speaker_head_accuracy: Option<f64>,
}

impl EvalSummary {
    pub fn frr(&self, counting: &str) -> Option<f64> {
        self.modes
            .iter()
            .find(|m| m.counting == counting)
            .and_then(|m| m.frr_at_target)
    }

    pub fn similarity_gap(&self) -> Option<f64> {
        Some(self.within_word_similarity? - self.cross_word_similarity?)
    }
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub summary: EvalSummary,
    pub scores: Vec<ScoreRecord>,
    pub tables: Vec<DetTable>,
}

/// Enrollment draw: the first `n` of a seeded shuffle of each keyword's
/// utterances. The draw depends only on the seed, the keyword and the
/// sorted utterance paths.
pub fn enrollment_split<'r>(
    records: &[&'r ManifestRecord],
    n: usize,
    seed: u64,
    keyword_index: u64,
) -> (Vec<&'r ManifestRecord>, Vec<&'r ManifestRecord>) {
    let mut sorted: Vec<&ManifestRecord> = records.to_vec();
    sorted.sort_by(|a, b| a.audio_path.cmp(&b.audio_path));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(keyword_index);
    sorted.shuffle(&mut rng);
    let rest = sorted.split_off(n.min(sorted.len()));
    (sorted, rest)
}

/// Window starts and feature matrices of one stream.
pub fn stream_windows(
    audio: &AudioBuffer,
    mel: &LogMel,
    hop: usize,
) -> AppResult<Vec<(usize, Tensor)>> {
    let starts = window_starts(audio.samples.len(), WINDOW_SAMPLES, hop);
    if starts.is_empty() {
        warn!(
            "stream of {:.2} s is shorter than one window; no scores",
            audio.seconds()
        );
        return Ok(Vec::new());
    }
    // Frames of a hop-aligned window coincide with frames of the whole stream.
    if !mel.normalize && hop % FRAME_SHIFT == 0 {
        let all = mel.compute(audio)?;
        let per = frame_count(WINDOW_SAMPLES);
        return Ok(starts
            .iter()
            .map(|&s| {
                let f0 = s / FRAME_SHIFT;
                let data = all.data()[f0 * all.cols()..(f0 + per) * all.cols()].to_vec();
                (s, Tensor::from_vec(per, all.cols(), data))
            })
            .collect());
    }
    starts
        .iter()
        .map(|&s| {
            let w = AudioBuffer {
                samples: audio.samples[s..s + WINDOW_SAMPLES].to_vec(),
                sample_rate: audio.sample_rate,
            };
            Ok((s, mel.compute(&w)?))
        })
        .collect()
}

/// Distance of every window to every enrollment; trial ids are `stream·K + k`.
pub fn sliding_detect(
    model: &KwsModel,
    windows: &[(usize, Tensor)],
    enrollments: &[EnrollmentSet],
    stream: usize,
    threads: usize,
) -> AppResult<Vec<NegativeWindow>> {
    let embeddings = par_map(windows, threads, |(_, f)| model.embed(f));
    let mut out = Vec::with_capacity(windows.len() * enrollments.len());
    for ((start, _), e) in windows.iter().zip(embeddings) {
        let e = e?;
        for (k, enr) in enrollments.iter().enumerate() {
            out.push(NegativeWindow {
                trial: stream * enrollments.len() + k,
                time: *start as f64 / SAMPLE_RATE as f64,
                distance: score_query(&e, enr)?,
            });
        }
    }
    Ok(out)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Mean same-label and different-label cosine similarity over all pairs.
pub fn similarity_by_label(embeddings: &[(usize, Vec<f64>)]) -> (Option<f64>, Option<f64>) {
    let (mut within, mut nw, mut cross, mut nc) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..embeddings.len() {
        for j in i + 1..embeddings.len() {
            let s = cosine(&embeddings[i].1, &embeddings[j].1);
            if embeddings[i].0 == embeddings[j].0 {
                within += s;
                nw += 1;
            } else {
                cross += s;
                nc += 1;
            }
        }
    }
    (
        (nw > 0).then(|| within / nw as f64),
        (nc > 0).then(|| cross / nc as f64),
    )
}

/// Accuracy of a nearest-centroid (cosine) classifier fitted on `train`.
pub fn nearest_centroid_accuracy(
    train: &[(usize, Vec<f64>)],
    test: &[(usize, Vec<f64>)],
) -> Option<f64> {
    if train.is_empty() || test.is_empty() {
        return None;
    }
    let mut centroids: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for (label, e) in train {
        let n = e.len();
        let entry = centroids.entry(*label).or_insert_with(|| (vec![0.0; n], 0));
        let norm = e.iter().map(|x| x * x).sum::<f64>().sqrt();
        entry.0.iter_mut().zip(e).for_each(|(c, x)| *c += x / norm);
        entry.1 += 1;
    }
    let correct = test
        .iter()
        .filter(|(label, e)| {
            let best = centroids.iter().map(|(l, (c, _))| (*l, cosine(e, c))).fold(
                (usize::MAX, f64::NEG_INFINITY),
                |b, x| if x.1 > b.1 { x } else { b },
            );
            best.0 == *label
        })
        .count();
    Some(correct as f64 / test.len() as f64)
}

/// Speaker-labelled word examples (Silence excluded) and their embeddings.
fn speaker_embeddings(
    model: &KwsModel,
    examples: &[TrainingExample],
    silence: usize,
    threads: usize,
) -> AppResult<Vec<(usize, Vec<f64>)>> {
    let keep: Vec<&TrainingExample> = examples
        .iter()
        .filter(|e| e.y_word != silence && e.y_speaker.is_some())
        .collect();
    let emb = par_map(&keep, threads, |e| model.embed(&e.features));
    keep.iter()
        .zip(emb)
        .map(|(e, v)| Ok((e.y_speaker.expect("filtered"), v?)))
        .collect()
}

/// Speaker-head accuracy on examples with a speaker label; the head is a
/// cosine classifier, so the embedding norm does not matter.
fn speaker_head_accuracy(model: &KwsModel, dev: &[(usize, Vec<f64>)]) -> Option<f64> {
    if dev.is_empty() {
        return None;
    }
    let w = model.store.get(model.heads.speaker.weight).transpose();
    let correct = dev
        .iter()
        .filter(|(label, e)| {
            let scores: Vec<f64> = (0..w.rows()).map(|c| cosine(e, w.row(c))).collect();
            (0..scores.len()).fold(0, |b, i| if scores[i] > scores[b] { i } else { b }) == *label
        })
        .count();
    Some(correct as f64 / dev.len() as f64)
}

/// Inputs of one evaluation beyond the model.
pub struct EvalInputs<'a> {
    pub manifest_dir: &'a Path,
    pub eval: &'a EvalSection,
    pub normalize_features: bool,
    pub threads: usize,
    pub label: &'a str,
    pub vocab: &'a Vocabulary,
    /// Train and dev examples for the speaker probe; skipped when empty.
    pub probe_train: &'a [TrainingExample],
    pub probe_dev: &'a [TrainingExample],
}

pub fn evaluate(model: &KwsModel, inputs: &EvalInputs<'_>) -> AppResult<EvalReport> {
    let dir = inputs.manifest_dir;
    let cfg = inputs.eval;
    let mel = LogMel::new(inputs.normalize_features);
    let positives = read_split(dir, Split::EvalPositive)?;
    let negatives = read_split(dir, Split::EvalNegative)?;
    let mut by_word: BTreeMap<&str, Vec<&ManifestRecord>> = BTreeMap::new();
    for r in &positives {
        by_word.entry(r.word.as_str()).or_default().push(r);
    }
    if by_word.is_empty() {
        return Err(AppError::Data(format!(
            "{}: no eval-positive records",
            dir.display()
        )));
    }

    let mut keywords = Vec::new();
    let mut enrollments = Vec::new();
    let mut queries: Vec<(usize, &ManifestRecord)> = Vec::new();
    for (k, (word, recs)) in by_word.iter().enumerate() {
        let (enrolled, rest) =
            enrollment_split(recs, cfg.enrollment_size, cfg.enrollment_seed, k as u64);
        let emb = par_map(&enrolled, inputs.threads, |r| -> AppResult<Vec<f64>> {
            let audio = read_wav(&resolve_audio(dir, r))?;
            Ok(model.embed(&segment_features(&audio, &mel)?)?)
        });
        let emb = emb.into_iter().collect::<AppResult<Vec<_>>>()?;
        enrollments.push(
            EnrollmentSet::new(k, emb, cfg.enrollment_size)
                .map_err(|e| AppError::Data(format!("keyword {word}: {e}")))?,
        );
        keywords.push(word.to_string());
        queries.extend(rest.into_iter().map(|r| (k, r)));
    }

    let query_emb = par_map(&queries, inputs.threads, |(_, r)| -> AppResult<Vec<f64>> {
        let audio = read_wav(&resolve_audio(dir, r))?;
        Ok(model.embed(&segment_features(&audio, &mel)?)?)
    });
    let mut scores = Vec::new();
    let mut pos_scores = Vec::new();
    let mut labelled = Vec::new();
    for (i, ((k, _), e)) in queries.iter().zip(query_emb).enumerate() {
        let e = e?;
        let s = score_query(&e, &enrollments[*k])?;
        pos_scores.push(s);
        scores.push(ScoreRecord {
            trial: format!("pos-{i:05}"),
            keyword: keywords[*k].clone(),
            score: s,
            label: TrialLabel::Positive,
            time: None,
        });
        labelled.push((*k, e));
    }
    for (k, enr) in enrollments.iter().enumerate() {
        labelled.extend(enr.embeddings.iter().map(|e| (k, e.clone())));
    }

    let mut neg = Vec::new();
    let mut stream_seconds = 0.0;
    for (s, r) in negatives.iter().enumerate() {
        let audio = read_wav(&resolve_audio(dir, r))?;
        let windows = stream_windows(&audio, &mel, cfg.hop_samples())?;
        if windows.is_empty() {
            continue;
        }
        stream_seconds += audio.seconds();
        let found = sliding_detect(model, &windows, &enrollments, s, inputs.threads)?;
        for w in &found {
            let k = w.trial % enrollments.len();
            scores.push(ScoreRecord {
                trial: format!("neg-{s:03}-{k:03}"),
                keyword: keywords[k].clone(),
                score: w.distance,
                label: TrialLabel::Negative,
                time: Some(w.time),
            });
        }
        neg.extend(found);
    }
    if neg.is_empty() {
        return Err(AppError::Data(format!(
            "{}: no scorable eval-negative audio",
            dir.display()
        )));
    }
    let negative_hours = stream_seconds / 3600.0 * keywords.len() as f64;
    info!(
        "{} positive trials, {} negative windows, {:.3} negative hours",
        pos_scores.len(),
        neg.len(),
        negative_hours
    );

    let mut tables = Vec::new();
    let mut modes = Vec::new();
    for counting in cfg.countings() {
        let det = summarize(
            &pos_scores,
            &neg,
            negative_hours,
            counting,
            cfg.target_fa_per_hour,
        )?;
        if det.frr_at_target.is_none() {
            warn!(
                "{} curve does not reach {} FA/hr",
                counting.name(),
                cfg.target_fa_per_hour
            );
        }
        tables.push(DetTable::new(
            inputs.label,
            &det.curve,
            cfg.target_fa_per_hour,
            det.frr_at_target,
        ));
        modes.push(ModeResult {
            counting: counting.name().into(),
            frr_at_target: det.frr_at_target,
        });
    }

    let (within, cross) = similarity_by_label(&labelled);
    let silence = inputs.vocab.silence_id();
    let probe_train = speaker_embeddings(model, inputs.probe_train, silence, inputs.threads)?;
    let probe_dev = speaker_embeddings(model, inputs.probe_dev, silence, inputs.threads)?;
    let summary = EvalSummary {
        label: inputs.label.into(),
        keywords,
        target_fa_per_hour: cfg.target_fa_per_hour,
        modes,
        positive_trials: pos_scores.len(),
        negative_windows: neg.len(),
        negative_hours,
        within_word_similarity: within,
        cross_word_similarity: cross,
        speaker_probe_accuracy: nearest_centroid_accuracy(&probe_train, &probe_dev),
        speaker_head_accuracy: speaker_head_accuracy(model, &probe_dev),
    };
    Ok(EvalReport {
        summary,
        scores,
        tables,
    })
}

/// Writes the score dump, one DET table per counting mode, and the summary.
pub fn write_report(report: &EvalReport, out: &Path) -> AppResult<Vec<PathBuf>> {
    fs::create_dir_all(out)?;
    let mut dump = String::new();
    for s in &report.scores {
        dump.push_str(&serde_json::to_string(s)?);
        dump.push('\n');
    }
    let mut written = vec![out.join(SCORES_FILE)];
    fs::write(&written[0], dump)?;
    for t in &report.tables {
        let path = out.join(format!("det-{}.json", t.counting));
        fs::write(&path, serde_json::to_string_pretty(t)? + "\n")?;
        written.push(path);
    }
    let path = out.join(SUMMARY_FILE);
    fs::write(&path, serde_json::to_string_pretty(&report.summary)? + "\n")?;
    written.push(path);
    Ok(written)
}
