mod common;

use common::{run_config, tiny_synth, write_corpus};
use qbye::checkpoint::{Checkpoint, MAGIC};
use qbye::cli::checkpoint_for;
use qbye::trainer::{load_data, train, LAST_CHECKPOINT};
use qbye::AppError;

fn trained() -> (tempfile::TempDir, Checkpoint, qbye::config::RunConfig) {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    write_corpus(&tiny_synth(), &data_dir);
    let cfg = run_config(&data_dir, &dir.path().join("run"), 1);
    let out = train(&cfg, &load_data(&cfg).unwrap(), None, None).unwrap();
    let ck = Checkpoint::load(&out.output_dir.join("checkpoints").join(LAST_CHECKPOINT)).unwrap();
    (dir, ck, cfg)
}

#[test]
fn bytes_round_trip_exactly() {
    let (_dir, ck, _) = trained();
    let bytes = ck.to_bytes().unwrap();
    assert_eq!(&bytes[..8], MAGIC);
    let back = Checkpoint::from_bytes(&bytes, "mem").unwrap();
    assert_eq!(back.header, ck.header);
    assert_eq!(back.values, ck.values);
    assert_eq!(back.optimizer, ck.optimizer);
    assert_eq!(back.to_bytes().unwrap(), bytes);
    let model = back.model().unwrap();
    assert_eq!(
        model
            .store
            .entries()
            .iter()
            .map(|e| e.value.clone())
            .collect::<Vec<_>>(),
        ck.values
    );
}

#[test]
fn corrupt_files_are_data_errors() {
    let (_dir, ck, _) = trained();
    let bytes = ck.to_bytes().unwrap();
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    let mut bad_version = bytes.clone();
    bad_version[8] = 9;
    let mut trailing = bytes.clone();
    trailing.push(0);
    for (name, b, needle) in [
        ("magic", bad_magic, "bad magic"),
        ("version", bad_version, "version 9"),
        ("truncated", bytes[..bytes.len() - 8].to_vec(), "truncated"),
        ("trailing", trailing, "trailing"),
        ("empty", vec![], "bad magic"),
    ] {
        let err = Checkpoint::from_bytes(&b, "f").unwrap_err();
        assert!(
            matches!(&err, AppError::Data(m) if m.contains(needle)),
            "{name}: {err}"
        );
    }
}

#[test]
fn config_mismatch_names_both_sides() {
    let (dir, _, cfg) = trained();
    let path = cfg.output_path().join("checkpoints").join(LAST_CHECKPOINT);
    checkpoint_for(&cfg, &path).unwrap();
    let mut other = cfg.clone();
    other.model.embedding_dim = 64;
    let err = checkpoint_for(&other, &path).unwrap_err();
    let AppError::Config(m) = &err else {
        panic!("{err}")
    };
    assert!(
        m.contains("dimension mismatch")
            && m.contains("\"embedding_dim\":128")
            && m.contains("\"embedding_dim\":64"),
        "{m}"
    );

    // Restoring into a model with other head sizes fails before copying.
    let ck = Checkpoint::load(&path).unwrap();
    let mut dims = ck.header.dims;
    dims.words += 1;
    let mut model =
        qbye_core::model::KwsModel::new(&ck.header.model, &ck.header.loss, dims, 0).unwrap();
    let err = ck.restore_into(&mut model).unwrap_err();
    assert!(
        matches!(&err, AppError::Config(m) if m.contains("checkpoint heads") && m.contains("config heads")),
        "{err}"
    );
    assert_eq!(err.exit_code(), 2);
    drop(dir);
}
