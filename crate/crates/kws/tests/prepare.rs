use std::fs;
use std::path::Path;

use qbye::frontend::{write_wav, AudioBuffer};
use qbye::manifest::{
    manifest_path, parse_manifest, read_manifest, read_vocabulary, to_jsonl, write_manifest,
};
use qbye::synth::{word_patterns, SynthConfig, MIN_PATTERN_DISTANCE};
use qbye::AppError;
use qbye_core::data::{ManifestRecord, PhonemeSpan, Split};

fn prepare(out: &Path, extra: &[&str]) -> Result<(), AppError> {
    let out = out.to_str().unwrap();
    let mut args = vec!["qbye", "prepare", "--out", out];
    args.extend_from_slice(extra);
    qbye::cli::run(args)
}

fn record(path: &str, word: &str, split: Split) -> ManifestRecord {
    ManifestRecord {
        audio_path: path.into(),
        word: word.into(),
        speaker_id: "s1".into(),
        phonemes: vec![PhonemeSpan {
            phoneme: "aa".into(),
            start_frame: 0,
            end_frame: 50,
        }],
        split,
    }
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((
                    p.strip_prefix(dir).unwrap().display().to_string(),
                    fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synthetic_prepare_is_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    prepare(a.path(), &["--synthetic", "--stream-seconds", "8"]).unwrap();
    prepare(b.path(), &["--synthetic", "--stream-seconds", "8"]).unwrap();
    let (fa, fb) = (files(a.path()), files(b.path()));
    assert_eq!(fa, fb);
    for split in Split::ALL {
        assert!(manifest_path(a.path(), split).exists(), "{}", split.name());
    }

    let cfg = SynthConfig::default();
    let train = read_manifest(&manifest_path(a.path(), Split::Train)).unwrap();
    let held: Vec<String> = (cfg.training_words()..cfg.words)
        .map(|w| cfg.word_name(w))
        .collect();
    assert!(
        train.iter().all(|r| !held.contains(&r.word)),
        "held-out words stay out of training"
    );
    let positives = read_manifest(&manifest_path(a.path(), Split::EvalPositive)).unwrap();
    assert_eq!(
        positives.len(),
        cfg.held_out_words * cfg.speakers * cfg.per_pair
    );
    assert!(positives.iter().all(|r| held.contains(&r.word)));
    let vocab = read_vocabulary(a.path()).unwrap();
    assert_eq!(vocab.words.len(), cfg.training_words() + 2);
    assert_eq!(vocab.speakers.len(), cfg.speakers);

    let c = tempfile::tempdir().unwrap();
    prepare(
        c.path(),
        &["--synthetic", "--stream-seconds", "8", "--seed", "3"],
    )
    .unwrap();
    assert_ne!(files(c.path()), fa, "the seed changes the corpus");
}

#[test]
fn word_patterns_are_separated() {
    let cfg = SynthConfig::default();
    let p = word_patterns(&cfg);
    assert_eq!(p.len(), cfg.words);
    for i in 0..p.len() {
        assert!(
            p[i].windows(2).all(|w| w[0] != w[1]),
            "no repeated neighbour"
        );
        for j in 0..i {
            let d = p[i].iter().zip(&p[j]).filter(|(a, b)| a != b).count();
            assert!(d >= MIN_PATTERN_DISTANCE, "{:?} vs {:?}", p[i], p[j]);
        }
    }
}

#[test]
fn zero_records_write_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("src.jsonl");
    write_manifest(&src, &[]).unwrap();
    let out = dir.path().join("out");
    let err = prepare(&out, &["--source", src.to_str().unwrap()]).unwrap_err();
    assert!(
        matches!(&err, AppError::Data(m) if m.contains("0 records")),
        "{err}"
    );
    assert_eq!(err.exit_code(), 3);
    assert!(!out.exists());
}

#[test]
fn bad_alignments_write_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("src.jsonl");
    let mut bad = record("b.wav", "two", Split::Train);
    bad.phonemes.clear();
    let mut reversed = record("c.wav", "one", Split::Dev);
    reversed.phonemes[0].start_frame = 60;
    write_manifest(&src, &[record("a.wav", "one", Split::Train), bad, reversed]).unwrap();
    let out = dir.path().join("out");
    let err = prepare(&out, &["--source", src.to_str().unwrap()]).unwrap_err();
    assert!(
        matches!(&err, AppError::Data(m) if m.contains("2 record diagnostics")),
        "{err}"
    );
    assert!(!out.exists());
    let d = qbye::cli::alignment_diagnostics(&read_manifest(&src).unwrap());
    assert!(
        d[0].contains("record 2") && d[0].contains("missing phoneme alignment"),
        "{d:?}"
    );
    assert!(d[1].contains("record 3"), "{d:?}");
}

#[test]
fn source_prepare_splits_and_resolves_paths() {
    let dir = tempfile::tempdir().unwrap();
    let audio = dir.path().join("a.wav");
    write_wav(&audio, &AudioBuffer::new(vec![0.0; 16_000])).unwrap();
    let src = dir.path().join("src.jsonl");
    let records = vec![
        record("a.wav", "one", Split::Train),
        record("a.wav", "two", Split::Train),
        record("a.wav", "one", Split::Dev),
        record("a.wav", "three", Split::EvalPositive),
        ManifestRecord {
            word: String::new(),
            speaker_id: String::new(),
            phonemes: vec![],
            ..record("a.wav", "", Split::EvalNegative)
        },
    ];
    write_manifest(&src, &records).unwrap();
    let out = dir.path().join("out");
    prepare(&out, &["--source", src.to_str().unwrap()]).unwrap();
    let train = read_manifest(&manifest_path(&out, Split::Train)).unwrap();
    assert_eq!(train.len(), 2);
    assert!(Path::new(&train[0].audio_path).is_absolute());
    assert!(Path::new(&train[0].audio_path).exists());
    assert_eq!(
        read_manifest(&manifest_path(&out, Split::EvalNegative))
            .unwrap()
            .len(),
        1
    );
    let vocab = read_vocabulary(&out).unwrap();
    assert_eq!(
        vocab.words.len(),
        4,
        "two training words, Silence and Unknown"
    );
}

#[test]
fn manifest_round_trip_and_line_numbers() {
    let records = vec![
        record("a.wav", "one", Split::Train),
        record("b.wav", "two", Split::EvalPositive),
    ];
    let text = to_jsonl(&records).unwrap();
    assert!(text.starts_with(r#"{"schema":"qbye-manifest","version":1}"#));
    assert_eq!(parse_manifest(&text, "m").unwrap(), records);

    let broken = format!("{text}{{\"audio_path\": 3}}\n");
    let err = parse_manifest(&broken, "m").unwrap_err();
    assert!(
        matches!(&err, AppError::Data(m) if m.starts_with("m:4:")),
        "{err}"
    );
    let err = parse_manifest("{\"schema\":\"other\",\"version\":1}\n", "m").unwrap_err();
    assert!(
        matches!(&err, AppError::Data(m) if m.contains("unsupported")),
        "{err}"
    );
    assert!(parse_manifest("", "m").is_err());
}

#[test]
fn prepare_needs_a_source() {
    let dir = tempfile::tempdir().unwrap();
    let err = prepare(dir.path(), &[]).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    let err = prepare(dir.path(), &["--synthetic", "--source", "x"]).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}
