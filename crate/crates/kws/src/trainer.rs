//! Epoch loop: batching, logging, dev scoring, checkpointing and resume.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use qbye_core::data::{build_vocabulary, make_batches, Split, TrainingExample, Vocabulary};
use qbye_core::losses::{HeadDims, HybridLossConfig};
use qbye_core::model::KwsModel;
use qbye_core::training::{apply_example_grads, example_grad, Adam, StepStats, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, TrainingState};
use crate::config::RunConfig;
use crate::dataset::{cap_fillers, load_split};
use crate::error::{AppError, AppResult};
use crate::frontend::LogMel;
use crate::manifest::{read_split, read_vocabulary, VOCABULARY_FILE};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";

/// `f` over `items` on up to `threads` scoped workers; output keeps input order.
pub fn par_map<T: Sync, R: Send>(
    items: &[T],
    threads: usize,
    f: impl Fn(&T) -> R + Sync,
) -> Vec<R> {
    if threads <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(|| c.iter().map(&f).collect::<Vec<R>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

/// One line of the metric log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    /// Optimiser steps completed, including this one.
    pub step: u64,
    pub word: f64,
    pub speaker: Option<f64>,
    pub phoneme: Option<f64>,
    pub total: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

impl StepRecord {
    fn new(epoch: usize, step: u64, s: &StepStats) -> Self {
        StepRecord {
            epoch,
            step,
            word: s.loss.word,
            speaker: s.loss.speaker,
            phoneme: s.loss.phoneme,
            total: s.loss.total,
            lr: s.lr,
            grad_norm: s.grad_norm,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: u64,
    pub mean_total: f64,
    pub dev_error: Option<f64>,
    pub best_dev_error: Option<f64>,
    pub checkpoint: PathBuf,
}

/// Loaded corpus for one run.
#[derive(Debug)]
pub struct TrainData {
    pub vocab: Vocabulary,
    pub train: Vec<TrainingExample>,
    pub dev: Vec<TrainingExample>,
}

impl TrainData {
    pub fn dims(&self) -> HeadDims {
        HeadDims {
            words: self.vocab.word_count(),
            speakers: self.vocab.speakers.len(),
            phonemes: self.vocab.phonemes.len(),
        }
    }
}

/// Vocabulary stored beside the manifests, or built from them.
pub fn vocabulary_for(dir: &Path, max_words: usize) -> AppResult<Vocabulary> {
    if dir.join(VOCABULARY_FILE).exists() {
        return read_vocabulary(dir);
    }
    let mut records = Vec::new();
    for split in Split::ALL {
        records.extend(read_split(dir, split)?);
    }
    let built = build_vocabulary(&records, max_words)?;
    if let Some(w) = &built.warning {
        warn!("{w}");
    }
    Ok(built.vocab)
}

pub fn load_data(cfg: &RunConfig) -> AppResult<TrainData> {
    let dir = &cfg.data.manifest_dir;
    let vocab = vocabulary_for(dir, cfg.data.max_words)?;
    let mel = LogMel::new(cfg.data.normalize_features);
    let train = load_split(dir, Split::Train, &vocab, &mel)?;
    let dev = load_split(dir, Split::Dev, &vocab, &mel)?;
    for (name, s) in [("train", &train), ("dev", &dev)] {
        info!(
            "{name}: {} records, {} loaded, {} skipped",
            s.records,
            s.examples.len(),
            s.skipped.len()
        );
    }
    if train.examples.is_empty() {
        return Err(AppError::Data(format!(
            "{}: no usable training examples",
            dir.display()
        )));
    }
    let train = cap_fillers(train.examples, &vocab, cfg.seed);
    Ok(TrainData {
        vocab,
        train,
        dev: dev.examples,
    })
}

/// Fraction of `examples` whose top word score is not their label.
pub fn word_error(
    model: &KwsModel,
    examples: &[TrainingExample],
    threads: usize,
) -> AppResult<Option<f64>> {
    if examples.is_empty() {
        return Ok(None);
    }
    let preds = par_map(examples, threads, |ex| model.predict_word(&ex.features));
    let mut wrong = 0usize;
    for (ex, p) in examples.iter().zip(preds) {
        if p? != ex.y_word {
            wrong += 1;
        }
    }
    Ok(Some(wrong as f64 / examples.len() as f64))
}

/// One optimiser step with per-example gradients spread over `threads`.
pub fn parallel_step(
    model: &mut KwsModel,
    adam: &mut Adam,
    batch: &[&TrainingExample],
    loss: &HybridLossConfig,
    cfg: &TrainConfig,
    threads: usize,
) -> AppResult<StepStats> {
    let grads = {
        let m: &KwsModel = model;
        par_map(batch, threads, |ex| example_grad(m, ex, loss))
            .into_iter()
            .collect::<Result<Vec<_>, _>>()?
    };
    Ok(apply_example_grads(model, adam, batch, grads, cfg)?)
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: KwsModel,
    pub vocab: Vocabulary,
    pub epochs: Vec<EpochRecord>,
    pub metrics: PathBuf,
    pub output_dir: PathBuf,
}

impl TrainOutcome {
    pub fn best_checkpoint(&self) -> PathBuf {
        self.output_dir.join(CHECKPOINT_DIR).join(BEST_CHECKPOINT)
    }
}

/// Keeps the log lines of steps at or before `step`, so a resumed run
/// continues the log of the run it resumes.
fn truncate_log(path: &Path, step: u64) -> AppResult<()> {
    if !path.exists() {
        return Ok(());
    }
    let mut kept = String::new();
    for line in BufReader::new(fs::File::open(path)?).lines() {
        let line = line?;
        let rec: StepRecord = serde_json::from_str(&line)?;
        if rec.step <= step {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    fs::write(path, kept)?;
    Ok(())
}

/// Trains from scratch or from `resume`, writing the metric log and
/// per-epoch checkpoints under the run's output directory. `stop_after`
/// ends the run early after that many epochs in total.
pub fn train(
    cfg: &RunConfig,
    data: &TrainData,
    resume: Option<&Path>,
    stop_after: Option<usize>,
) -> AppResult<TrainOutcome> {
    cfg.validate()?;
    let out = cfg.output_path();
    let ckpt_dir = out.join(CHECKPOINT_DIR);
    fs::create_dir_all(&ckpt_dir)
        .map_err(|e| AppError::Io(format!("{}: {e}", ckpt_dir.display())))?;
    let model_cfg = cfg.model_config()?;
    let loss = cfg.loss_config();
    let tcfg = cfg.train_config();
    let threads = cfg.train.threads;
    let mut model = KwsModel::new(&model_cfg, &loss, data.dims(), cfg.seed)?;
    let metrics = out.join(METRICS_FILE);

    let (mut adam, mut state) = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.header.model != model_cfg {
                return Err(AppError::Config(format!(
                    "dimension mismatch: checkpoint model {} vs config model {}",
                    serde_json::to_string(&ck.header.model)?,
                    serde_json::to_string(&model_cfg)?
                )));
            }
            ck.restore_into(&mut model)?;
            let adam = ck.adam(&model, &tcfg)?;
            truncate_log(&metrics, ck.header.state.step)?;
            info!(
                "resuming from {} at epoch {}",
                path.display(),
                ck.header.state.epoch
            );
            (adam, ck.header.state.clone())
        }
        None => {
            fs::write(&metrics, "")?;
            (
                Adam::new(&model.store, &tcfg),
                TrainingState {
                    epoch: 0,
                    step: 0,
                    best_dev_error: None,
                },
            )
        }
    };
    fs::write(out.join("run.toml"), cfg.to_toml()?)?;

    let mut log = BufWriter::new(
        fs::OpenOptions::new()
            .append(true)
            .create(true)
            .open(&metrics)?,
    );
    let mut epochs = Vec::new();
    let last_epoch = stop_after.map_or(tcfg.epochs, |s| s.min(tcfg.epochs));
    for epoch in state.epoch..last_epoch {
        let batches = make_batches(data.train.len(), tcfg.batch_size, tcfg.seed, epoch as u64);
        let mut sum_total = 0.0;
        for idx in &batches {
            let batch: Vec<&TrainingExample> = idx.iter().map(|&i| &data.train[i]).collect();
            let stats = match parallel_step(&mut model, &mut adam, &batch, &loss, &tcfg, threads) {
                Ok(s) => s,
                Err(e) => {
                    log.flush()?;
                    return Err(e);
                }
            };
            sum_total += stats.loss.total;
            serde_json::to_writer(&mut log, &StepRecord::new(epoch, adam.step, &stats))?;
            log.write_all(b"\n")?;
        }
        log.flush()?;
        let dev_error = word_error(&model, &data.dev, threads)?;
        let improved = match (dev_error, state.best_dev_error) {
            (Some(e), Some(b)) => e < b,
            (Some(_), None) => true,
            (None, _) => true,
        };
        if let (Some(e), true) = (dev_error, improved) {
            state.best_dev_error = Some(e);
        }
        state.epoch = epoch + 1;
        state.step = adam.step;
        let ck = Checkpoint::capture(
            &model,
            &loss,
            &data.vocab,
            cfg.seed,
            state.clone(),
            Some(&adam),
        );
        let path = ckpt_dir.join(format!("epoch-{:03}.ckpt", epoch + 1));
        ck.save(&path)?;
        ck.save(&ckpt_dir.join(LAST_CHECKPOINT))?;
        if improved {
            ck.save(&ckpt_dir.join(BEST_CHECKPOINT))?;
        }
        let rec = EpochRecord {
            epoch: epoch + 1,
            step: adam.step,
            mean_total: sum_total / batches.len() as f64,
            dev_error,
            best_dev_error: state.best_dev_error,
            checkpoint: path,
        };
        info!(
            "epoch {} step {} loss {:.4} dev error {}",
            rec.epoch,
            rec.step,
            rec.mean_total,
            dev_error.map_or("n/a".to_string(), |e| format!("{e:.3}"))
        );
        epochs.push(rec);
    }
    let summary = serde_json::to_string_pretty(&epochs)?;
    fs::write(out.join("epochs.json"), summary + "\n")?;
    Ok(TrainOutcome {
        model,
        vocab: data.vocab.clone(),
        epochs,
        metrics,
        output_dir: out,
    })
}

/// Parses a metric log.
pub fn read_metrics(path: &Path) -> AppResult<Vec<StepRecord>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .map(|l| serde_json::from_str(l).map_err(AppError::from))
        .collect()
}
