mod common;

use common::{run_config, tiny_synth, write_corpus};
use proptest::prelude::*;
use qbye::evaluate::{
    enrollment_split, evaluate, nearest_centroid_accuracy, similarity_by_label, stream_windows,
    write_report, DetTable, EvalInputs, EvalSummary, SCORES_FILE, SUMMARY_FILE,
};
use qbye::frontend::{AudioBuffer, LogMel};
use qbye::trainer::{load_data, train};
use qbye_core::data::{ManifestRecord, Split};

fn noise(n: usize) -> AudioBuffer {
    AudioBuffer::new(
        (0..n)
            .map(|i| ((i * 7919 + 13) % 2003) as f64 / 2003.0 - 0.5)
            .collect(),
    )
}

#[test]
fn window_counts_follow_the_hop() {
    let mel = LogMel::new(false);
    assert_eq!(stream_windows(&noise(32_000), &mel, 1600).unwrap().len(), 1);
    let w = stream_windows(&noise(48_000), &mel, 1600).unwrap();
    assert_eq!(w.len(), 11);
    assert_eq!(
        w.iter().map(|(s, _)| *s).collect::<Vec<_>>(),
        (0..11).map(|i| i * 1600).collect::<Vec<_>>()
    );
    assert!(
        stream_windows(&noise(31_999), &mel, 1600)
            .unwrap()
            .is_empty(),
        "short streams yield no windows"
    );
}

#[test]
fn stream_framing_matches_per_window_analysis() {
    let audio = noise(40_000);
    for (normalize, hop) in [(false, 1600), (false, 1000), (true, 1600)] {
        let mel = LogMel::new(normalize);
        for (start, f) in stream_windows(&audio, &mel, hop).unwrap() {
            let direct = mel
                .compute(&AudioBuffer::new(
                    audio.samples[start..start + 32_000].to_vec(),
                ))
                .unwrap();
            assert_eq!(f, direct, "start {start}, hop {hop}, normalize {normalize}");
        }
    }
}

fn records(n: usize) -> Vec<ManifestRecord> {
    (0..n)
        .map(|i| ManifestRecord {
            audio_path: format!("u{i:02}.wav"),
            word: "kw".into(),
            speaker_id: format!("s{}", i % 3),
            phonemes: vec![],
            split: Split::EvalPositive,
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn enrollment_draw_is_a_seeded_set_partition(n in 3usize..30, seed: u64, k in 0u64..8, rot in 0usize..30) {
        let recs = records(n);
        let refs: Vec<&ManifestRecord> = recs.iter().collect();
        let mut rotated = refs.clone();
        rotated.rotate_left(rot % n);
        let (e1, r1) = enrollment_split(&refs, 3, seed, k);
        let (e2, r2) = enrollment_split(&rotated, 3, seed, k);
        prop_assert_eq!(&e1, &e2, "input order does not matter");
        prop_assert_eq!(&r1, &r2);
        prop_assert_eq!(e1.len(), 3);
        prop_assert_eq!(e1.len() + r1.len(), n);
        prop_assert!(e1.iter().all(|e| !r1.contains(e)));
    }
}

#[test]
fn enrollment_draws_differ_between_keywords() {
    let recs = records(20);
    let refs: Vec<&ManifestRecord> = recs.iter().collect();
    let draws: Vec<_> = (0..4).map(|k| enrollment_split(&refs, 3, 0, k).0).collect();
    assert!(draws.windows(2).any(|w| w[0] != w[1]));
}

#[test]
fn similarity_and_probe_hand_examples() {
    let e = |l: usize, v: &[f64]| (l, v.to_vec());
    let set = [e(0, &[1.0, 0.0]), e(0, &[2.0, 0.0]), e(1, &[0.0, 1.0])];
    assert_eq!(similarity_by_label(&set), (Some(1.0), Some(0.0)));
    assert_eq!(similarity_by_label(&set[..1]), (None, None));
    let train = [e(0, &[1.0, 0.1]), e(1, &[0.1, 1.0])];
    let test = [e(0, &[3.0, 0.0]), e(1, &[0.0, 2.0]), e(1, &[1.0, 0.2])];
    assert_eq!(nearest_centroid_accuracy(&train, &test), Some(2.0 / 3.0));
    assert_eq!(nearest_centroid_accuracy(&[], &test), None);
}

#[test]
fn evaluation_emits_both_counting_modes() {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    let synth = tiny_synth();
    write_corpus(&synth, &data_dir);
    let cfg = run_config(&data_dir, &dir.path().join("run"), 1);
    let data = load_data(&cfg).unwrap();
    let out = train(&cfg, &data, None, None).unwrap();
    let report = evaluate(
        &out.model,
        &EvalInputs {
            manifest_dir: &data_dir,
            eval: &cfg.eval,
            normalize_features: false,
            threads: 1,
            label: "tiny",
            vocab: &data.vocab,
            probe_train: &data.train,
            probe_dev: &data.dev,
        },
    )
    .unwrap();
    let s = &report.summary;
    assert_eq!(s.keywords, vec![synth.word_name(2)]);
    assert_eq!(s.positive_trials, synth.speakers * synth.per_pair - 3);
    // One 4 s stream at a 0.1 s hop: floor((4 − 2) / 0.1) + 1 windows.
    assert_eq!(s.negative_windows, 21);
    assert!((s.negative_hours - 4.0 / 3600.0).abs() < 1e-12);
    assert_eq!(
        s.modes
            .iter()
            .map(|m| m.counting.as_str())
            .collect::<Vec<_>>(),
        ["per-window", "dedup"]
    );
    assert_eq!(report.tables.len(), 2);
    assert!(report
        .tables
        .iter()
        .all(|t| t.label == "tiny" && !t.points.is_empty()));
    assert!(
        s.within_word_similarity.is_some() && s.cross_word_similarity.is_none(),
        "one keyword has no cross pairs"
    );
    assert!(s.speaker_probe_accuracy.is_some() && s.speaker_head_accuracy.is_some());
    assert!(report.scores.iter().all(|r| r.score.is_finite()));

    let eval_dir = dir.path().join("eval");
    let written = write_report(&report, &eval_dir).unwrap();
    assert_eq!(written.len(), 4);
    for t in &report.tables {
        assert_eq!(
            &DetTable::load(&eval_dir.join(format!("det-{}.json", t.counting))).unwrap(),
            t
        );
    }
    let back: EvalSummary =
        serde_json::from_str(&std::fs::read_to_string(eval_dir.join(SUMMARY_FILE)).unwrap())
            .unwrap();
    assert_eq!(&back, s);
    let lines = std::fs::read_to_string(eval_dir.join(SCORES_FILE))
        .unwrap()
        .lines()
        .count();
    assert_eq!(lines, s.positive_trials + s.negative_windows);
}
