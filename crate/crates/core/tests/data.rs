mod common;

use proptest::prelude::*;
use qbye_core::data::{
    build_vocabulary, cap_filler_classes, centre_offset, expand_phonemes, make_batches,
    validate_spans, ManifestRecord, PhonemeSpan, Split, FRAME_SHIFT, MAX_WORDS, SILENCE, UNKNOWN,
    WINDOW_LENGTH,
};
use qbye_core::model::SEGMENT_FRAMES;
use qbye_core::Error;

const SEGMENT: usize = 32_000;

fn record(word: &str, speaker: &str, split: Split) -> ManifestRecord {
    ManifestRecord {
        audio_path: format!("{word}.wav"),
        word: word.into(),
        speaker_id: speaker.into(),
        phonemes: vec![span("ah", 0, 10)],
        split,
    }
}

fn span(p: &str, start: usize, end: usize) -> PhonemeSpan {
    PhonemeSpan {
        phoneme: p.into(),
        start_frame: start,
        end_frame: end,
    }
}

/// `count` training segments of each `(word, count)`.
fn corpus(counts: &[(String, usize)]) -> Vec<ManifestRecord> {
    counts
        .iter()
        .flat_map(|(w, n)| (0..*n).map(move |_| record(w, "s0", Split::Train)))
        .collect()
}

#[test]
fn small_corpus_shrinks_with_warning() {
    let recs = corpus(&[("go".into(), 3), ("stop".into(), 2), ("yes".into(), 1)]);
    let build = build_vocabulary(&recs, MAX_WORDS).unwrap();
    let v = &build.vocab;
    assert_eq!(v.word_count(), 5);
    assert_eq!(v.words, ["go", "stop", "yes", SILENCE, UNKNOWN]);
    assert!(build.warning.unwrap().contains("shrinks to 5"));
    assert_eq!((v.silence_id(), v.unknown_id()), (3, 4));
    assert_eq!(v.word_id("stop"), 1);
    assert_eq!(v.word_id("unheard"), v.unknown_id());
    assert_eq!(v.word_id(SILENCE), v.silence_id());
}

#[test]
fn full_vocabulary_has_1002_classes() {
    // Word i appears 2000 − i times, so ranks are by index.
    let counts: Vec<(String, usize)> = (0..1001).map(|i| (format!("w{i:04}"), 2001 - i)).collect();
    let mut recs = corpus(&counts);
    recs.push(record(SILENCE, "s0", Split::Train));
    let build = build_vocabulary(&recs, MAX_WORDS).unwrap();
    assert_eq!(build.vocab.word_count(), 1002);
    assert!(build.warning.is_none());
    assert_eq!(build.vocab.word_id("w0999"), 999);
    assert_eq!(build.vocab.word_id("w1000"), build.vocab.unknown_id());
}

#[test]
fn boundary_ties_break_lexicographically() {
    let recs = corpus(&[
        ("zeta".into(), 4),
        ("beta".into(), 2),
        ("alpha".into(), 2),
        ("gamma".into(), 1),
    ]);
    let v = build_vocabulary(&recs, 2).unwrap().vocab;
    assert_eq!(v.words, ["zeta", "alpha", SILENCE, UNKNOWN]);
    assert_eq!(v.word_id("beta"), v.unknown_id());
    let shuffled: Vec<ManifestRecord> = recs.iter().rev().cloned().collect();
    assert_eq!(build_vocabulary(&shuffled, 2).unwrap().vocab, v);
}

#[test]
fn speakers_and_phonemes_are_sorted() {
    let mut recs = vec![
        record("a", "spk2", Split::Train),
        record("b", "spk1", Split::Dev),
    ];
    recs[0].phonemes = vec![span("t", 0, 2), span("ah", 2, 4), span(SILENCE, 4, 6)];
    recs.push(ManifestRecord {
        speaker_id: "noise".into(),
        ..record("", "", Split::EvalNegative)
    });
    let v = build_vocabulary(&recs, MAX_WORDS).unwrap().vocab;
    assert_eq!(v.speakers, ["spk1", "spk2"]);
    assert_eq!(v.phonemes, [SILENCE, "ah", "t"]);
    assert_eq!(
        (v.phoneme_id("t"), v.phoneme_id(SILENCE), v.phoneme_id("zz")),
        (Some(2), Some(0), None)
    );
    assert_eq!(v.speaker_id("spk2"), Some(1));
}

#[test]
fn empty_training_split_is_an_error() {
    let recs = vec![record("a", "s", Split::Dev)];
    assert_eq!(
        build_vocabulary(&recs, MAX_WORDS).unwrap_err(),
        Error::Empty("training split")
    );
}

#[test]
fn centre_offsets() {
    assert_eq!(centre_offset(16_000, SEGMENT), 8_000);
    assert_eq!(centre_offset(48_000, SEGMENT), -8_000);
    assert_eq!(centre_offset(SEGMENT, SEGMENT), 0);
    // The odd sample of padding or clipping goes to the right.
    assert_eq!(centre_offset(31_999, SEGMENT), 0);
    assert_eq!(centre_offset(32_001, SEGMENT), 0);
    assert_eq!(centre_offset(31_997, SEGMENT), 1);
}

fn vocab_with(phonemes: &[&str]) -> qbye_core::data::Vocabulary {
    let mut r = record("w", "s", Split::Train);
    r.phonemes = phonemes
        .iter()
        .enumerate()
        .map(|(i, p)| span(p, i, i + 1))
        .collect();
    build_vocabulary(&[r], MAX_WORDS).unwrap().vocab
}

#[test]
fn one_span_over_a_full_segment_is_constant() {
    let v = vocab_with(&["ah"]);
    let labels = expand_phonemes(
        &[span("ah", 0, SEGMENT / FRAME_SHIFT)],
        &v,
        SEGMENT,
        0,
        SEGMENT_FRAMES,
    )
    .unwrap();
    assert_eq!(labels, vec![v.phoneme_id("ah").unwrap(); SEGMENT_FRAMES]);
}

#[test]
fn padded_frames_are_silence() {
    let v = vocab_with(&["ah"]);
    let raw = 16_000;
    let pad = (SEGMENT - raw) / 2;
    let labels = expand_phonemes(
        &[span("ah", 0, raw / FRAME_SHIFT)],
        &v,
        raw,
        pad as isize,
        SEGMENT_FRAMES,
    )
    .unwrap();
    for (f, &l) in labels.iter().enumerate() {
        let centre = f * FRAME_SHIFT + WINDOW_LENGTH / 2;
        let inside = centre >= pad && centre < pad + raw;
        assert_eq!(l != 0, inside, "frame {f} centre {centre}");
    }
    // Centres 7880 and 8040 straddle the left pad; 23880 and 24040 the right.
    assert_eq!(
        (labels[48], labels[49], labels[148], labels[149]),
        (0, 1, 1, 0)
    );
}

#[test]
fn clipped_segments_shift_spans() {
    let v = vocab_with(&["ah", "t"]);
    let raw = 48_000;
    // "t" covers raw frames [150, 160): samples 24000..25600, i.e. 16000..17600 after clipping 8000.
    let spans = [
        span("ah", 0, 150),
        span("t", 150, 160),
        span("ah", 160, 300),
    ];
    let labels =
        expand_phonemes(&spans, &v, raw, centre_offset(raw, SEGMENT), SEGMENT_FRAMES).unwrap();
    let t = v.phoneme_id("t").unwrap();
    let frames: Vec<usize> = (0..SEGMENT_FRAMES).filter(|&f| labels[f] == t).collect();
    let want: Vec<usize> = (0..SEGMENT_FRAMES)
        .filter(|f| (16_000..17_600).contains(&(f * FRAME_SHIFT + WINDOW_LENGTH / 2)))
        .collect();
    assert_eq!(frames, want);
    assert!(
        labels.iter().all(|&l| l != 0),
        "clipped segments have no padding"
    );
}

#[test]
fn malformed_spans() {
    let v = vocab_with(&["ah"]);
    let bad = |spans: &[PhonemeSpan]| {
        matches!(validate_spans(spans, 16_000), Err(Error::MalformedSpan(_)))
    };
    assert!(bad(&[span("ah", 5, 5)]));
    assert!(bad(&[span("ah", 0, 10), span("ah", 9, 12)]));
    assert!(bad(&[span("ah", 90, 101)]));
    assert!(!bad(&[span("ah", 0, 10), span("ah", 10, 100)]));
    let err = expand_phonemes(&[span("zz", 0, 5)], &v, 16_000, 8_000, SEGMENT_FRAMES).unwrap_err();
    assert!(err.to_string().contains("unknown phoneme zz"));
}

#[test]
fn batches_keep_the_partial_tail() {
    let b = make_batches(130, 64, 7, 0);
    assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), [64, 64, 2]);
    let mut all: Vec<usize> = b.concat();
    all.sort_unstable();
    assert_eq!(all, (0..130).collect::<Vec<_>>());
    assert_eq!(make_batches(130, 64, 7, 0), b);
    assert_ne!(make_batches(130, 64, 7, 1), b, "epochs reshuffle");
}

#[test]
fn different_seeds_give_different_orders() {
    let base = make_batches(1000, 64, 0, 0).concat();
    for seed in 1..20 {
        assert_ne!(
            make_batches(1000, 64, seed, 0).concat(),
            base,
            "seed {seed}"
        );
    }
}

#[test]
fn filler_classes_are_capped_at_the_median() {
    let v = vocab_with(&["ah"]);
    let (sil, unk) = (v.silence_id(), v.unknown_id());
    assert_eq!(v.word_count(), 3);
    // One regular class with 5 examples; median 5.
    let mut labels = vec![0; 5];
    labels.extend(vec![sil; 12]);
    labels.extend(vec![unk; 3]);
    let keep = cap_filler_classes(&labels, &v, 1);
    let count = |c| keep.iter().filter(|&&i| labels[i] == c).count();
    assert_eq!((count(0), count(sil), count(unk)), (5, 5, 3));
    assert!(keep.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(cap_filler_classes(&labels, &v, 1), keep);
}

proptest! {
    #[test]
    fn batches_partition_the_examples(n in 0usize..500, size in 1usize..80, seed: u64) {
        let b = make_batches(n, size, seed, 3);
        prop_assert_eq!(b.len(), n.div_ceil(size));
        prop_assert!(b.iter().rev().skip(1).all(|x| x.len() == size));
        let mut all = b.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn centre_offset_splits_evenly(len in 1usize..80_000) {
        let off = centre_offset(len, SEGMENT);
        let diff = SEGMENT as isize - len as isize;
        let right = diff - off;
        prop_assert!(right == off || right == off + diff.signum());
    }
}
