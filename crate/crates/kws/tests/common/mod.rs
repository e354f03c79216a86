#![allow(dead_code)]

use std::path::Path;

use qbye::config::RunConfig;
use qbye::synth::{generate, SynthConfig};

/// Three words (one held out) by two speakers, three utterances per pair:
/// ten training examples (two of them silence) and four dev examples.
pub fn tiny_synth() -> SynthConfig {
    SynthConfig {
        words: 3,
        speakers: 2,
        per_pair: 3,
        held_out_words: 1,
        dev_per_pair: 1,
        silence_segments: 2,
        negative_streams: 1,
        stream_seconds: 4.0,
        ..SynthConfig::default()
    }
}

pub fn write_corpus(cfg: &SynthConfig, dir: &Path) {
    let corpus = generate(cfg, dir).unwrap();
    qbye::cli::write_splits(dir, &corpus.records, qbye_core::data::MAX_WORDS).unwrap();
}

/// Quarter-scale LiCoNet with GAP and the hybrid SoftTriple loss.
pub fn run_config(manifest_dir: &Path, output_dir: &Path, epochs: usize) -> RunConfig {
    let text = format!(
        r#"
seed = 7
output_dir = "{}"
[data]
manifest_dir = "{}"
[model]
encoder = "liconet"
pooling = "gap"
scale = 0.25
[loss]
kind = "hybrid-softtriple"
[train]
epochs = {epochs}
batch_size = 4
lr_min = 1e-5
lr_max = 3e-3
half_cycle_steps = 4
"#,
        output_dir.display(),
        manifest_dir.display()
    );
    let cfg = RunConfig::from_toml(&text).unwrap();
    cfg.validate().unwrap();
    cfg
}
