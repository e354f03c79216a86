//! Manifest records, vocabularies, per-frame phoneme labels and batching.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Word label of non-speech segments, and the phoneme label of frames outside every span.
pub const SILENCE: &str = "<sil>";
pub const UNKNOWN: &str = "<unk>";
/// Upper bound on in-vocabulary words; Silence and Unknown come on top.
pub const MAX_WORDS: usize = 1000;
/// Samples per 10 ms label frame at 16 kHz.
pub const FRAME_SHIFT: usize = 160;
pub const WINDOW_LENGTH: usize = 400;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Dev,
    EvalPositive,
    EvalNegative,
}

impl Split {
    pub const ALL: [Split; 4] = [
        Split::Train,
        Split::Dev,
        Split::EvalPositive,
        Split::EvalNegative,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::EvalPositive => "eval-positive",
            Split::EvalNegative => "eval-negative",
        }
    }
}

/// A phoneme occupying label frames `[start_frame, end_frame)` of the raw segment.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhonemeSpan {
    pub phoneme: String,
    pub start_frame: usize,
    pub end_frame: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub audio_path: String,
    /// `<sil>` marks a silence segment. Eval-negative streams leave it empty.
    pub word: String,
    pub speaker_id: String,
    #[serde(default)]
    pub phonemes: Vec<PhonemeSpan>,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    /// In-vocabulary words by id; Silence and Unknown are the last two.
    pub words: Vec<String>,
    pub speakers: Vec<String>,
    /// `<sil>` is id 0.
    pub phonemes: Vec<String>,
}

impl Vocabulary {
    pub fn word_count(&self) -> usize {
        self.words.len()
    }

    pub fn silence_id(&self) -> usize {
        self.words.len() - 2
    }

    pub fn unknown_id(&self) -> usize {
        self.words.len() - 1
    }

    pub fn word_id(&self, word: &str) -> usize {
        if word == SILENCE {
            return self.silence_id();
        }
        let regular = &self.words[..self.words.len() - 2];
        regular
            .iter()
            .position(|w| w == word)
            .unwrap_or(self.unknown_id())
    }

    pub fn speaker_id(&self, speaker: &str) -> Option<usize> {
        self.speakers
            .binary_search_by(|s| s.as_str().cmp(speaker))
            .ok()
    }

    pub fn phoneme_id(&self, phoneme: &str) -> Option<usize> {
        if phoneme == SILENCE {
            return Some(0);
        }
        self.phonemes[1..]
            .binary_search_by(|p| p.as_str().cmp(phoneme))
            .ok()
            .map(|i| i + 1)
    }

    /// Word lookup table for repeated queries.
    pub fn word_index(&self) -> BTreeMap<&str, usize> {
        self.words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.as_str(), i))
            .collect()
    }
}

/// Vocabulary plus a note when fewer than `max_words` distinct words exist.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VocabularyBuild {
    pub vocab: Vocabulary,
    pub warning: Option<String>,
}

/// The `max_words` most frequent training words (by segment count, ties
/// lexicographic), then Silence and Unknown. Speakers and phonemes come from
/// every split that carries them.
pub fn build_vocabulary<'r>(
    records: impl IntoIterator<Item = &'r ManifestRecord>,
    max_words: usize,
) -> Result<VocabularyBuild> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    let mut speakers: BTreeMap<&str, ()> = BTreeMap::new();
    let mut phonemes: BTreeMap<&str, ()> = BTreeMap::new();
    let mut train = 0usize;
    for r in records {
        for span in &r.phonemes {
            if span.phoneme != SILENCE {
                phonemes.insert(&span.phoneme, ());
            }
        }
        if r.split != Split::EvalNegative && !r.speaker_id.is_empty() {
            speakers.insert(&r.speaker_id, ());
        }
        if r.split == Split::Train {
            train += 1;
            if r.word != SILENCE && r.word != UNKNOWN {
                *counts.entry(&r.word).or_default() += 1;
            }
        }
    }
    if train == 0 {
        return Err(Error::Empty("training split"));
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let warning = (ranked.len() < max_words).then(|| {
        format!(
            "only {} distinct training words; vocabulary shrinks to {}",
            ranked.len(),
            ranked.len() + 2
        )
    });
    ranked.truncate(max_words);
    let mut words: Vec<String> = ranked.into_iter().map(|(w, _)| w.to_string()).collect();
    words.push(SILENCE.into());
    words.push(UNKNOWN.into());
    let mut phoneme_list = alloc::vec![SILENCE.to_string()];
    phoneme_list.extend(phonemes.into_keys().map(String::from));
    Ok(VocabularyBuild {
        vocab: Vocabulary {
            words,
            speakers: speakers.into_keys().map(String::from).collect(),
            phonemes: phoneme_list,
        },
        warning,
    })
}

/// Left padding in samples (negative when clipping) that centres a segment
/// of `len` samples in `target`; the odd sample goes to the right.
pub fn centre_offset(len: usize, target: usize) -> isize {
    (target as isize - len as isize) / 2
}

/// Checks that spans are non-empty, ordered, non-overlapping and inside a
/// segment of `raw_samples` samples.
pub fn validate_spans(spans: &[PhonemeSpan], raw_samples: usize) -> Result<()> {
    let limit = raw_samples.div_ceil(FRAME_SHIFT);
    let mut prev_end = 0;
    for s in spans {
        if s.start_frame >= s.end_frame {
            return Err(Error::MalformedSpan(format!(
                "{} has empty range {}..{}",
                s.phoneme, s.start_frame, s.end_frame
            )));
        }
        if s.start_frame < prev_end {
            return Err(Error::MalformedSpan(format!(
                "{} at {} overlaps the previous span",
                s.phoneme, s.start_frame
            )));
        }
        if s.end_frame > limit {
            return Err(Error::MalformedSpan(format!(
                "{} ends at frame {} beyond segment end {limit}",
                s.phoneme, s.end_frame
            )));
        }
        prev_end = s.end_frame;
    }
    Ok(())
}

/// Per-frame phoneme ids for `frames` analysis frames of a standardized
/// segment. Frame `f` takes the span containing its centre sample, mapped
/// back to raw-segment time through `offset`; frames outside every span,
/// including padding, are Silence (id 0).
pub fn expand_phonemes(
    spans: &[PhonemeSpan],
    vocab: &Vocabulary,
    raw_samples: usize,
    offset: isize,
    frames: usize,
) -> Result<Vec<usize>> {
    validate_spans(spans, raw_samples)?;
    let ids = spans
        .iter()
        .map(|s| {
            vocab
                .phoneme_id(&s.phoneme)
                .ok_or_else(|| Error::MalformedSpan(format!("unknown phoneme {}", s.phoneme)))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = alloc::vec![0usize; frames];
    for (f, label) in out.iter_mut().enumerate() {
        let centre = (f * FRAME_SHIFT + WINDOW_LENGTH / 2) as isize - offset;
        if centre < 0 || centre >= raw_samples as isize {
            continue;
        }
        let unit = centre as usize / FRAME_SHIFT;
        if let Some(i) = spans
            .iter()
            .position(|s| s.start_frame <= unit && unit < s.end_frame)
        {
            *label = ids[i];
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    pub id: String,
    pub features: Tensor,
    pub y_word: usize,
    pub y_speaker: Option<usize>,
    /// Same length as the feature frame count.
    pub y_phoneme: Vec<usize>,
}

/// A seeded permutation of `0..n` cut into batches; the last batch may be short.
/// `epoch` selects an independent stream so every epoch reshuffles.
pub fn make_batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    order.shuffle(&mut rng);
    order
        .chunks(batch_size.max(1))
        .map(|c| c.to_vec())
        .collect()
}

/// Indices of a training selection where the Silence and Unknown classes are
/// each capped at the median per-class count of the regular words.
pub fn cap_filler_classes(labels: &[usize], vocab: &Vocabulary, seed: u64) -> Vec<usize> {
    let (sil, unk) = (vocab.silence_id(), vocab.unknown_id());
    let mut per_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        per_class.entry(l).or_default().push(i);
    }
    let mut regular: Vec<usize> = per_class
        .iter()
        .filter(|(c, _)| **c != sil && **c != unk)
        .map(|(_, v)| v.len())
        .collect();
    regular.sort_unstable();
    let cap = if regular.is_empty() {
        usize::MAX
    } else {
        regular[regular.len() / 2]
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = Vec::with_capacity(labels.len());
    for (class, mut idx) in per_class {
        if (class == sil || class == unk) && idx.len() > cap {
            idx.shuffle(&mut rng);
            idx.truncate(cap);
        }
        keep.extend(idx);
    }
    keep.sort_unstable();
    keep
}
