//! Synthetic tone-word corpus.
//!
//! A word is a fixed sequence of tones drawn from a small tone inventory;
//! each tone acts as one phoneme. A speaker shifts every pitch by a constant
//! factor and colours the tones with its own harmonic mix. Utterances jitter
//! timing, pitch and level, so no two segments are identical.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use qbye_core::data::{ManifestRecord, PhonemeSpan, Split, FRAME_SHIFT, SILENCE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, AppResult};
use crate::frontend::{write_wav, AudioBuffer, SAMPLE_RATE};

/// Base frequencies of the tone inventory, Hz.
pub const TONES: [f64; 8] = [310.0, 390.0, 490.0, 620.0, 780.0, 980.0, 1240.0, 1560.0];
/// Speaker pitch factors stay within half a tone step (a factor of about
/// 1.12), so a tone's identity survives every speaker shift.
pub const SPEAKER_PITCH: [f64; 5] = [0.94, 0.97, 1.0, 1.03, 1.06];
/// Any two word patterns differ in at least this many positions.
pub const MIN_PATTERN_DISTANCE: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub words: usize,
    pub speakers: usize,
    /// Utterances per (word, speaker) pair.
    pub per_pair: usize,
    /// The last `held_out_words` words never appear in training; they are
    /// the query-by-example keywords.
    pub held_out_words: usize,
    /// Of each training pair's utterances, this many go to the dev split.
    pub dev_per_pair: usize,
    pub silence_segments: usize,
    pub negative_streams: usize,
    pub stream_seconds: f64,
    pub tones_per_word: usize,
    pub noise_level: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            words: 10,
            speakers: 5,
            per_pair: 20,
            held_out_words: 4,
            dev_per_pair: 4,
            silence_segments: 40,
            negative_streams: 4,
            stream_seconds: 120.0,
            tones_per_word: 3,
            noise_level: 0.01,
            seed: 17,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> AppResult<()> {
        let bad = |m: &str| Err(AppError::Config(format!("synth.{m}")));
        if self.words == 0 || self.speakers == 0 || self.per_pair == 0 {
            return bad("words, speakers and per_pair must be >= 1");
        }
        if self.held_out_words >= self.words {
            return bad("held_out_words must leave at least one training word");
        }
        if self.dev_per_pair >= self.per_pair {
            return bad("dev_per_pair must be < per_pair");
        }
        if self.speakers > SPEAKER_PITCH.len() {
            return Err(AppError::Config(format!(
                "synth.speakers: at most {}",
                SPEAKER_PITCH.len()
            )));
        }
        if self.tones_per_word == 0 || self.tones_per_word > 5 {
            return bad("tones_per_word must be in 1..=5");
        }
        if self.negative_streams > 0 && self.stream_seconds < 2.0 {
            return bad("stream_seconds must be >= 2");
        }
        Ok(())
    }

    pub fn word_name(&self, w: usize) -> String {
        format!("word{w:02}")
    }

    pub fn training_words(&self) -> usize {
        self.words - self.held_out_words
    }
}

pub fn tone_name(t: usize) -> String {
    format!("t{t}")
}

/// Tone patterns, one per word, with no tone repeated back to back and
/// pairwise at least [`MIN_PATTERN_DISTANCE`] positions apart.
pub fn word_patterns(cfg: &SynthConfig) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut patterns: Vec<Vec<usize>> = Vec::new();
    while patterns.len() < cfg.words {
        let mut p: Vec<usize> = Vec::with_capacity(cfg.tones_per_word);
        while p.len() < cfg.tones_per_word {
            let t = rng.gen_range(0..TONES.len());
            if p.last() != Some(&t) {
                p.push(t);
            }
        }
        let far = |q: &Vec<usize>| {
            p.iter().zip(q).filter(|(a, b)| a != b).count() >= MIN_PATTERN_DISTANCE.min(p.len())
        };
        if patterns.iter().all(far) {
            patterns.push(p);
        }
    }
    patterns
}

/// Relative amplitudes of harmonics 1..=3 for a speaker.
fn timbre(speaker: usize) -> [f64; 3] {
    let s = speaker as f64;
    [1.0, 0.15 + 0.1 * s, 0.3 - 0.05 * s]
}

fn noise(rng: &mut ChaCha8Rng, n: usize, level: f64) -> Vec<f64> {
    (0..n).map(|_| level * rng.gen_range(-1.0..1.0)).collect()
}

/// Length range of an utterance in seconds, background noise included; at
/// least one analysis window so segments are never zero padded, as with
/// sliding windows over a stream.
pub const UTTERANCE_SECONDS: (f64, f64) = (2.0, 2.4);

/// Tone sequence of `pattern` by `speaker`, without surrounding background,
/// and its tone spans in samples.
fn tones(
    rng: &mut ChaCha8Rng,
    pattern: &[usize],
    speaker: usize,
    noise_level: f64,
) -> (Vec<f64>, Vec<(usize, usize, usize)>) {
    let sr = SAMPLE_RATE as f64;
    let mut samples = Vec::new();
    let mut spans = Vec::with_capacity(pattern.len());
    let level = rng.gen_range(0.25..0.5);
    let harmonics = timbre(speaker);
    let ramp = (0.01 * sr) as usize;
    for (i, &t) in pattern.iter().enumerate() {
        if i > 0 {
            let gap = rng.gen_range(0.04..0.08);
            samples.extend(noise(rng, (gap * sr) as usize, noise_level));
        }
        let n = (rng.gen_range(0.16..0.3) * sr) as usize;
        let f0 = TONES[t] * SPEAKER_PITCH[speaker] * rng.gen_range(0.99..1.01);
        let start = samples.len();
        for k in 0..n {
            let tt = k as f64 / sr;
            let env = (k.min(n - 1 - k) as f64 / ramp as f64).min(1.0);
            let v: f64 = harmonics
                .iter()
                .enumerate()
                .map(|(h, a)| a * (2.0 * PI * f0 * (h + 1) as f64 * tt).sin())
                .sum();
            samples.push(level * env * v / 1.5 + noise_level * rng.gen_range(-1.0..1.0));
        }
        spans.push((t, start, samples.len()));
    }
    (samples, spans)
}

/// One utterance of `pattern` by `speaker` inside background noise, with
/// its tone spans in 10 ms frames.
pub fn utterance(
    rng: &mut ChaCha8Rng,
    pattern: &[usize],
    speaker: usize,
    noise_level: f64,
) -> (Vec<f64>, Vec<PhonemeSpan>) {
    let sr = SAMPLE_RATE as f64;
    let (word, raw_spans) = tones(rng, pattern, speaker, noise_level);
    let total =
        ((rng.gen_range(UTTERANCE_SECONDS.0..UTTERANCE_SECONDS.1) * sr) as usize).max(word.len());
    // The word lies inside the central two seconds that survive standardization.
    let margin = total.saturating_sub(crate::frontend::SEGMENT_SAMPLES) / 2;
    let lead = margin + rng.gen_range(0..=(total - 2 * margin).saturating_sub(word.len()));
    let mut samples = noise(rng, lead, noise_level);
    samples.extend_from_slice(&word);
    samples.extend(noise(rng, total - lead - word.len(), noise_level));
    let shift = FRAME_SHIFT as f64;
    let spans = raw_spans
        .into_iter()
        .map(|(t, a, b)| PhonemeSpan {
            phoneme: tone_name(t),
            start_frame: ((lead + a) as f64 / shift).ceil() as usize,
            end_frame: ((lead + b) as f64 / shift).floor() as usize,
        })
        .collect();
    (samples, spans)
}

/// Manifests by split, in generation order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SynthCorpus {
    pub records: Vec<ManifestRecord>,
}

/// Writes all WAV files under `dir/audio` and returns the records.
pub fn generate(cfg: &SynthConfig, dir: &Path) -> AppResult<SynthCorpus> {
    cfg.validate()?;
    let audio_dir = dir.join("audio");
    fs::create_dir_all(&audio_dir)?;
    let patterns = word_patterns(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xa0d1);
    let mut records = Vec::new();
    let emit =
        |name: String, samples: Vec<f64>, rec: ManifestRecord| -> AppResult<ManifestRecord> {
            write_wav(&audio_dir.join(&name), &AudioBuffer::new(samples))?;
            Ok(ManifestRecord {
                audio_path: format!("audio/{name}"),
                ..rec
            })
        };
    for (w, pattern) in patterns.iter().enumerate() {
        let held_out = w >= cfg.training_words();
        for s in 0..cfg.speakers {
            for u in 0..cfg.per_pair {
                let (samples, phonemes) = utterance(&mut rng, pattern, s, cfg.noise_level);
                let split = if held_out {
                    Split::EvalPositive
                } else if u >= cfg.per_pair - cfg.dev_per_pair {
                    Split::Dev
                } else {
                    Split::Train
                };
                let rec = ManifestRecord {
                    audio_path: String::new(),
                    word: cfg.word_name(w),
                    speaker_id: format!("spk{s}"),
                    phonemes,
                    split,
                };
                records.push(emit(
                    format!("{}_spk{s}_{u:03}.wav", cfg.word_name(w)),
                    samples,
                    rec,
                )?);
            }
        }
    }
    for i in 0..cfg.silence_segments {
        let secs = rng.gen_range(UTTERANCE_SECONDS.0..UTTERANCE_SECONDS.1);
        let samples = noise(
            &mut rng,
            (secs * SAMPLE_RATE as f64) as usize,
            cfg.noise_level,
        );
        let rec = ManifestRecord {
            audio_path: String::new(),
            word: SILENCE.into(),
            // Silence is cut from a speaker's recording, so it keeps that speaker.
            speaker_id: format!("spk{}", i % cfg.speakers),
            phonemes: Vec::new(),
            split: if i % 5 == 4 { Split::Dev } else { Split::Train },
        };
        records.push(emit(format!("silence_{i:03}.wav"), samples, rec)?);
    }
    for i in 0..cfg.negative_streams {
        let (samples, phonemes) = negative_stream(&mut rng, cfg, &patterns);
        let rec = ManifestRecord {
            audio_path: String::new(),
            word: String::new(),
            speaker_id: String::new(),
            phonemes,
            split: Split::EvalNegative,
        };
        records.push(emit(format!("negative_{i:02}.wav"), samples, rec)?);
    }
    Ok(SynthCorpus { records })
}

/// Training-word utterances from random speakers separated by noise, and
/// the stream's tone spans in 10 ms frames.
fn negative_stream(
    rng: &mut ChaCha8Rng,
    cfg: &SynthConfig,
    patterns: &[Vec<usize>],
) -> (Vec<f64>, Vec<PhonemeSpan>) {
    let target = (cfg.stream_seconds * SAMPLE_RATE as f64) as usize;
    let mut out = Vec::with_capacity(target + SAMPLE_RATE as usize * 2);
    let mut spans = Vec::new();
    while out.len() < target {
        let gap = rng.gen_range(0.3..1.0);
        out.extend(noise(
            rng,
            (gap * SAMPLE_RATE as f64) as usize,
            cfg.noise_level,
        ));
        let w = rng.gen_range(0..cfg.training_words());
        let s = rng.gen_range(0..cfg.speakers);
        let base = out.len();
        let (samples, tone_spans) = tones(rng, &patterns[w], s, cfg.noise_level);
        out.extend(samples);
        spans.extend(tone_spans.into_iter().map(|(t, a, b)| PhonemeSpan {
            phoneme: tone_name(t),
            start_frame: (base + a).div_ceil(FRAME_SHIFT),
            end_frame: (base + b) / FRAME_SHIFT,
        }));
    }
    out.truncate(target);
    let limit = target / FRAME_SHIFT;
    spans.retain(|s| s.end_frame <= limit);
    (out, spans)
}
