//! `qbye` subcommands: prepare, train, evaluate, plot-det and profile.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{error, info};
use qbye_core::data::{build_vocabulary, validate_spans, ManifestRecord, Split, SILENCE};
use qbye_core::model::ModelConfig;

use crate::checkpoint::Checkpoint;
use crate::config::{EncoderKind, LossKind, Overrides, PoolKind, RunConfig};
use crate::error::{AppError, AppResult};
use crate::evaluate::{evaluate, write_report, DetTable, EvalInputs};
use crate::frontend::LogMel;
use crate::manifest::{manifest_path, read_manifest, write_manifest, write_vocabulary};
use crate::plot::plot_det;
use crate::profile::{format_breakdown, format_table, profile_model, reference_rows};
use crate::synth::{generate, SynthConfig};
use crate::trainer::{load_data, train, BEST_CHECKPOINT, CHECKPOINT_DIR};

#[derive(Debug, Parser)]
#[command(name = "qbye", version, about = "Query-by-example keyword spotting")]
pub struct Cli {
    /// Log verbosity (error, warn, info, debug); `RUST_LOG` takes precedence.
    #[arg(long, global = true, default_value = "info")]
    pub log_level: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write per-split manifests and the vocabulary.
    Prepare(PrepareArgs),
    /// Train a model; writes the metric log and per-epoch checkpoints.
    Train(TrainArgs),
    /// Enrollment, sliding-window scoring and DET tables for a checkpoint.
    Evaluate(EvaluateArgs),
    /// Overlay DET tables in one SVG figure.
    PlotDet(PlotArgs),
    /// Parameter and FLOP table.
    Profile(ProfileArgs),
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    /// Generate the built-in tone-word corpus.
    #[arg(long, conflicts_with = "source")]
    pub synthetic: bool,
    /// A manifest holding records of every split, to be validated and split.
    #[arg(long)]
    pub source: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Seed of the synthetic generator.
    #[arg(long, default_value_t = SynthConfig::default().seed)]
    pub seed: u64,
    /// Length of each synthetic negative stream.
    #[arg(long)]
    pub stream_seconds: Option<f64>,
    #[arg(long, default_value_t = qbye_core::data::MAX_WORDS)]
    pub max_words: usize,
}

#[derive(Debug, Args, Default)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, value_enum)]
    pub loss: Option<LossKind>,
    #[arg(long, value_enum)]
    pub pool: Option<PoolKind>,
    #[arg(long, value_enum)]
    pub encoder: Option<EncoderKind>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub scale: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long)]
    pub manifest_dir: Option<PathBuf>,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    pub threads: Option<usize>,
}

impl RunArgs {
    pub fn resolve(&self) -> AppResult<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        cfg.apply(&Overrides {
            loss: self.loss,
            pool: self.pool,
            encoder: self.encoder,
            epochs: self.epochs,
            scale: self.scale,
            seed: self.seed,
            output_dir: self.output_dir.clone(),
            manifest_dir: self.manifest_dir.clone(),
        });
        if let Some(t) = self.threads {
            cfg.train.threads = t;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Defaults to the run's best checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Defaults to `<output_dir>/eval`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Curve label; defaults to `<encoder>-<pooling>-<loss>`.
    #[arg(long)]
    pub label: Option<String>,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    #[arg(required = true)]
    pub tables: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub max_fa: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ProfileArgs {
    /// Profile these configs instead of the three shipped full-size models.
    #[arg(long)]
    pub config: Vec<PathBuf>,
    /// Also print the per-layer breakdown.
    #[arg(long)]
    pub breakdown: bool,
}

/// Process entry point: parses `std::env::args` and returns the exit code.
pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let _ =
        env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(&cli.log_level))
            .format_timestamp(None)
            .try_init();
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Parses `args` (program name first) and runs the subcommand.
pub fn run<I, T>(args: I) -> AppResult<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| AppError::Config(e.to_string()))?;
    dispatch(cli.command)
}

pub fn dispatch(cmd: Command) -> AppResult<()> {
    match cmd {
        Command::Prepare(a) => cmd_prepare(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::PlotDet(a) => cmd_plot(&a),
        Command::Profile(a) => cmd_profile(&a),
    }
}

/// Per-record alignment diagnostics of a source manifest.
pub fn alignment_diagnostics(records: &[ManifestRecord]) -> Vec<String> {
    let mut out = Vec::new();
    for (i, r) in records.iter().enumerate() {
        let needs_alignment = r.split != Split::EvalNegative && r.word != SILENCE;
        if r.audio_path.is_empty() {
            out.push(format!("record {}: missing audio_path", i + 1));
        }
        if needs_alignment && r.word.is_empty() {
            out.push(format!("record {} ({}): missing word", i + 1, r.audio_path));
        }
        if needs_alignment && r.phonemes.is_empty() {
            out.push(format!(
                "record {} ({}): missing phoneme alignment",
                i + 1,
                r.audio_path
            ));
        }
        if needs_alignment && r.split != Split::EvalPositive && r.speaker_id.is_empty() {
            out.push(format!(
                "record {} ({}): missing speaker_id",
                i + 1,
                r.audio_path
            ));
        }
        if let Err(e) = validate_spans(&r.phonemes, usize::MAX - crate::frontend::FRAME_SHIFT) {
            out.push(format!("record {} ({}): {e}", i + 1, r.audio_path));
        }
    }
    out
}

/// Writes every split manifest of `records` and their vocabulary under `out`.
pub fn write_splits(out: &Path, records: &[ManifestRecord], max_words: usize) -> AppResult<()> {
    let built = build_vocabulary(records, max_words)?;
    if let Some(w) = &built.warning {
        log::warn!("{w}");
    }
    fs::create_dir_all(out)?;
    for split in Split::ALL {
        let part: Vec<ManifestRecord> = records
            .iter()
            .filter(|r| r.split == split)
            .cloned()
            .collect();
        info!("{}: {} records", split.name(), part.len());
        write_manifest(&manifest_path(out, split), &part)?;
    }
    write_vocabulary(out, &built.vocab)
}

pub fn cmd_prepare(a: &PrepareArgs) -> AppResult<()> {
    if a.synthetic {
        let mut cfg = SynthConfig {
            seed: a.seed,
            ..SynthConfig::default()
        };
        if let Some(s) = a.stream_seconds {
            cfg.stream_seconds = s;
        }
        cfg.validate()?;
        let corpus = generate(&cfg, &a.out)?;
        return write_splits(&a.out, &corpus.records, a.max_words);
    }
    let source = a
        .source
        .as_ref()
        .ok_or_else(|| AppError::Config("prepare needs --synthetic or --source".into()))?;
    let records = read_manifest(source)?;
    if records.is_empty() {
        return Err(AppError::Data(format!(
            "{}: corpus has 0 records; nothing written",
            source.display()
        )));
    }
    let diagnostics = alignment_diagnostics(&records);
    if !diagnostics.is_empty() {
        for d in &diagnostics {
            error!("{}: {d}", source.display());
        }
        return Err(AppError::Data(format!(
            "{}: {} record diagnostics; nothing written",
            source.display(),
            diagnostics.len()
        )));
    }
    let base = source.parent().unwrap_or(Path::new("."));
    let base = fs::canonicalize(base).unwrap_or_else(|_| base.to_path_buf());
    let records: Vec<ManifestRecord> = records
        .into_iter()
        .map(|r| {
            let p = crate::manifest::resolve_audio(&base, &r);
            ManifestRecord {
                audio_path: p.to_string_lossy().into_owned(),
                ..r
            }
        })
        .collect();
    write_splits(&a.out, &records, a.max_words)
}

pub fn cmd_train(a: &TrainArgs) -> AppResult<()> {
    let cfg = a.run.resolve()?;
    let data = load_data(&cfg)?;
    let outcome = train(&cfg, &data, a.resume.as_deref(), None)?;
    info!("metrics: {}", outcome.metrics.display());
    info!("best checkpoint: {}", outcome.best_checkpoint().display());
    Ok(())
}

/// Default curve label of a run.
pub fn run_label(cfg: &RunConfig) -> String {
    let loss = serde_json::to_value(cfg.loss.kind)
        .ok()
        .and_then(|v| v.as_str().map(String::from))
        .unwrap_or_default();
    let pool = cfg
        .model_config()
        .map(|m| m.pooling.name().to_string())
        .unwrap_or_default();
    format!("{}-{pool}-{loss}", cfg.model.encoder.family().name())
}

/// Loads `path` and checks it against the model `cfg` would build.
pub fn checkpoint_for(cfg: &RunConfig, path: &Path) -> AppResult<Checkpoint> {
    let ck = Checkpoint::load(path)?;
    let want: ModelConfig = cfg.model_config()?;
    if ck.header.model != want {
        return Err(AppError::Config(format!(
            "dimension mismatch: checkpoint {} holds {} but config builds {}",
            path.display(),
            serde_json::to_string(&ck.header.model)?,
            serde_json::to_string(&want)?
        )));
    }
    Ok(ck)
}

pub fn cmd_evaluate(a: &EvaluateArgs) -> AppResult<()> {
    let cfg = a.run.resolve()?;
    let out_dir = cfg.output_path();
    let ckpt = a
        .checkpoint
        .clone()
        .unwrap_or_else(|| out_dir.join(CHECKPOINT_DIR).join(BEST_CHECKPOINT));
    let ck = checkpoint_for(&cfg, &ckpt)?;
    let mut model = qbye_core::model::KwsModel::new(
        &cfg.model_config()?,
        &ck.header.loss,
        ck.header.dims,
        cfg.seed,
    )?;
    ck.restore_into(&mut model)?;
    let vocab = ck.header.vocabulary.clone();
    let mel = LogMel::new(cfg.data.normalize_features);
    let dir = &cfg.data.manifest_dir;
    let train = crate::dataset::load_split(dir, Split::Train, &vocab, &mel)?;
    let dev = crate::dataset::load_split(dir, Split::Dev, &vocab, &mel)?;
    let label = a.label.clone().unwrap_or_else(|| run_label(&cfg));
    let report = evaluate(
        &model,
        &EvalInputs {
            manifest_dir: dir,
            eval: &cfg.eval,
            normalize_features: cfg.data.normalize_features,
            threads: cfg.train.threads,
            label: &label,
            vocab: &vocab,
            probe_train: &train.examples,
            probe_dev: &dev.examples,
        },
    )?;
    let out = a.out.clone().unwrap_or_else(|| out_dir.join("eval"));
    for p in write_report(&report, &out)? {
        info!("wrote {}", p.display());
    }
    for m in &report.summary.modes {
        let frr = m
            .frr_at_target
            .map_or("unreached".to_string(), |f| format!("{:.2}%", 100.0 * f));
        println!(
            "{label} {} FRR@{} FA/hr: {frr}",
            m.counting, cfg.eval.target_fa_per_hour
        );
    }
    Ok(())
}

pub fn cmd_plot(a: &PlotArgs) -> AppResult<()> {
    let tables = a
        .tables
        .iter()
        .map(|p| DetTable::load(p))
        .collect::<AppResult<Vec<_>>>()?;
    plot_det(&tables, &a.out, a.max_fa)?;
    info!("wrote {}", a.out.display());
    Ok(())
}

pub fn cmd_profile(a: &ProfileArgs) -> AppResult<()> {
    let mut rows = Vec::new();
    let mut breakdowns = Vec::new();
    if a.config.is_empty() {
        rows = reference_rows()?;
        if a.breakdown {
            for f in [
                qbye_core::encoders::EncoderFamily::EcapaTdnn,
                qbye_core::encoders::EncoderFamily::Conformer,
                qbye_core::encoders::EncoderFamily::Liconet,
            ] {
                breakdowns.push((
                    f.name().to_string(),
                    profile_model(f.name(), &ModelConfig::reference(f), true)?.1,
                ));
            }
        }
    } else {
        for path in &a.config {
            let cfg = RunConfig::load(path)?;
            cfg.validate()?;
            let m = cfg.model_config()?;
            let full = m == ModelConfig::reference(m.encoder.family());
            let name = path
                .file_stem()
                .map_or_else(|| "config".into(), |s| s.to_string_lossy().into_owned());
            let (row, report) = profile_model(&name, &m, full)?;
            rows.push(row);
            breakdowns.push((name, report));
        }
    }
    print!("{}", format_table(&rows));
    if a.breakdown {
        for (name, r) in breakdowns {
            println!("\n[{name}]");
            print!("{}", format_breakdown(&r));
        }
    }
    Ok(())
}
