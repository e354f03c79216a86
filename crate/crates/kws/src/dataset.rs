//! Manifest records to training examples.

use std::path::Path;

use log::warn;
use qbye_core::data::{
    cap_filler_classes, expand_phonemes, ManifestRecord, Split, TrainingExample, Vocabulary,
    SILENCE,
};
use qbye_core::Tensor;

use crate::error::{AppError, AppResult};
use crate::frontend::{read_wav, standardize_segment, AudioBuffer, LogMel, SEGMENT_SAMPLES};
use crate::manifest::{read_split, resolve_audio};

/// Features and labels for one record whose audio is already in memory.
pub fn example_from_audio(
    record: &ManifestRecord,
    id: String,
    audio: &AudioBuffer,
    vocab: &Vocabulary,
    mel: &LogMel,
) -> AppResult<TrainingExample> {
    let raw = audio.samples.len();
    let features = mel.compute(&standardize_segment(audio, SEGMENT_SAMPLES)?)?;
    let offset = qbye_core::data::centre_offset(raw, SEGMENT_SAMPLES);
    let y_phoneme = expand_phonemes(&record.phonemes, vocab, raw, offset, features.rows())?;
    let y_word = if record.word == SILENCE {
        vocab.silence_id()
    } else {
        vocab.word_id(&record.word)
    };
    Ok(TrainingExample {
        id,
        features,
        y_word,
        y_speaker: vocab.speaker_id(&record.speaker_id),
        y_phoneme,
    })
}

/// Outcome of loading one split: every record is either loaded or skipped.
#[derive(Debug, Default)]
pub struct LoadedSplit {
    pub examples: Vec<TrainingExample>,
    /// `(audio_path, reason)` of records whose audio could not be read.
    pub skipped: Vec<(String, String)>,
    pub records: usize,
}

impl LoadedSplit {
    pub fn reconciles(&self) -> bool {
        self.examples.len() + self.skipped.len() == self.records
    }
}

/// Loads every record of `split`. Unreadable audio is skipped with a logged
/// diagnostic; malformed spans abort.
pub fn load_split(
    dir: &Path,
    split: Split,
    vocab: &Vocabulary,
    mel: &LogMel,
) -> AppResult<LoadedSplit> {
    let records = read_split(dir, split)?;
    load_records(dir, &records, vocab, mel)
}

pub fn load_records(
    dir: &Path,
    records: &[ManifestRecord],
    vocab: &Vocabulary,
    mel: &LogMel,
) -> AppResult<LoadedSplit> {
    let mut out = LoadedSplit {
        records: records.len(),
        ..Default::default()
    };
    for r in records {
        let audio = match read_wav(&resolve_audio(dir, r)) {
            Ok(a) => a,
            Err(e) => {
                warn!("skipping {}: {e}", r.audio_path);
                out.skipped.push((r.audio_path.clone(), e.to_string()));
                continue;
            }
        };
        let ex = example_from_audio(r, r.audio_path.clone(), &audio, vocab, mel)
            .map_err(|e| AppError::Data(format!("{}: {e}", r.audio_path)))?;
        out.examples.push(ex);
    }
    Ok(out)
}

/// Training examples after capping Silence and Unknown at the median class count.
pub fn cap_fillers(
    examples: Vec<TrainingExample>,
    vocab: &Vocabulary,
    seed: u64,
) -> Vec<TrainingExample> {
    let labels: Vec<usize> = examples.iter().map(|e| e.y_word).collect();
    let keep = cap_filler_classes(&labels, vocab, seed);
    let mut slots: Vec<Option<TrainingExample>> = examples.into_iter().map(Some).collect();
    keep.into_iter().filter_map(|i| slots[i].take()).collect()
}

/// Features of a whole stream, for sliding-window slicing.
pub fn stream_features(audio: &AudioBuffer, mel: &LogMel) -> AppResult<Tensor> {
    mel.compute(audio)
}
