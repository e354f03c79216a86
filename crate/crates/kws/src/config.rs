//! Run configuration: one TOML file plus command-line overrides.
//!
//! Unknown keys are rejected, and every field is validated before any
//! data is read.

use std::path::{Path, PathBuf};

use qbye_core::encoders::{
    ConformerConfig, EcapaConfig, EncoderConfig, EncoderFamily, LiconetConfig,
};
use qbye_core::evaluation::{
    FaCounting, DEFAULT_DEDUP_SECONDS, DEFAULT_HOP_SAMPLES, ENROLLMENT_SIZE,
};
use qbye_core::losses::{AamConfig, HybridLossConfig, SoftTripleConfig, WordLoss};
use qbye_core::model::{ModelConfig, EMBEDDING_DIM};
use qbye_core::nn::EvalNorm;
use qbye_core::pooling::{AspConfig, GapConfig, PoolingConfig};
use qbye_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, AppResult};

/// Overrides the root that relative `output_dir` values resolve against.
pub const OUTPUT_ROOT_ENV: &str = "QBYE_OUTPUT_ROOT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    Ce,
    Aam,
    #[serde(rename = "softtriple")]
    #[value(name = "softtriple")]
    SoftTriple,
    HybridAam,
    #[serde(rename = "hybrid-softtriple")]
    #[value(name = "hybrid-softtriple")]
    HybridSoftTriple,
}

impl LossKind {
    pub fn word_loss(self) -> WordLoss {
        match self {
            LossKind::Ce => WordLoss::Ce,
            LossKind::Aam | LossKind::HybridAam => WordLoss::Aam,
            LossKind::SoftTriple | LossKind::HybridSoftTriple => WordLoss::SoftTriple,
        }
    }

    pub fn is_hybrid(self) -> bool {
        matches!(self, LossKind::HybridAam | LossKind::HybridSoftTriple)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    Asp,
    Gap,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Liconet,
    Conformer,
    #[value(name = "ecapa_tdnn", alias = "ecapa")]
    EcapaTdnn,
}

impl EncoderKind {
    pub fn family(self) -> EncoderFamily {
        match self {
            EncoderKind::Liconet => EncoderFamily::Liconet,
            EncoderKind::Conformer => EncoderFamily::Conformer,
            EncoderKind::EcapaTdnn => EncoderFamily::EcapaTdnn,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Directory holding `{split}.jsonl` and `vocabulary.json`.
    pub manifest_dir: PathBuf,
    #[serde(default = "default_max_words")]
    pub max_words: usize,
    /// Per-utterance band normalisation of the log-Mel features.
    #[serde(default)]
    pub normalize_features: bool,
}

fn default_max_words() -> usize {
    qbye_core::data::MAX_WORDS
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub encoder: EncoderKind,
    pub pooling: PoolKind,
    /// Width multiplier on the encoder and pooler; 1 is full size.
    #[serde(default = "one")]
    pub scale: f64,
    #[serde(default = "default_embedding_dim")]
    pub embedding_dim: usize,
    /// Batch-norm statistics at inference: `utterance` or `running`.
    #[serde(default)]
    pub eval_norm: EvalNorm,
    /// Full replacements of the shipped architecture; only the one matching
    /// `encoder` (or `pooling`) may be present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub liconet: Option<LiconetConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conformer: Option<ConformerConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ecapa_tdnn: Option<EcapaConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gap: Option<GapConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub asp: Option<AspConfig>,
}

fn one() -> f64 {
    1.0
}

fn default_embedding_dim() -> usize {
    EMBEDDING_DIM
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSection {
    pub kind: LossKind,
    /// η; ignored (treated as 0) by single-task kinds.
    #[serde(default = "default_speaker_weight")]
    pub speaker_weight: f64,
    /// μ; ignored (treated as 0) by single-task kinds.
    #[serde(default = "default_phoneme_weight")]
    pub phoneme_weight: f64,
    #[serde(default = "one")]
    pub grl_scale: f64,
    #[serde(default)]
    pub aam: AamSection,
    #[serde(default)]
    pub softtriple: SoftTripleSection,
}

fn default_speaker_weight() -> f64 {
    0.1
}

fn default_phoneme_weight() -> f64 {
    0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AamSection {
    pub margin: f64,
    pub scale: f64,
}

impl Default for AamSection {
    fn default() -> Self {
        let d = AamConfig::default();
        AamSection {
            margin: d.margin,
            scale: d.scale,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SoftTripleSection {
    pub lambda: f64,
    pub delta: f64,
    pub centers_per_class: usize,
    pub gamma: f64,
}

impl Default for SoftTripleSection {
    fn default() -> Self {
        let d = SoftTripleConfig::default();
        SoftTripleSection {
            lambda: d.lambda,
            delta: d.delta,
            centers_per_class: d.centers_per_class,
            gamma: d.gamma,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_min: f64,
    pub lr_max: f64,
    pub half_cycle_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub grad_clip: Option<f64>,
    /// Worker threads for per-utterance gradients; results are summed in
    /// batch order, so the count never changes the numbers.
    pub threads: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        TrainSection {
            epochs: d.epochs,
            batch_size: d.batch_size,
            lr_min: d.lr_min,
            lr_max: d.lr_max,
            half_cycle_steps: d.half_cycle_steps,
            beta1: d.beta1,
            beta2: d.beta2,
            adam_eps: d.adam_eps,
            grad_clip: d.grad_clip,
            threads: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub enrollment_size: usize,
    pub hop_seconds: f64,
    /// Merge radius of the deduplicated false-accept count.
    pub dedup_seconds: f64,
    pub target_fa_per_hour: f64,
    pub enrollment_seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            enrollment_size: ENROLLMENT_SIZE,
            hop_seconds: DEFAULT_HOP_SAMPLES as f64 / crate::frontend::SAMPLE_RATE as f64,
            dedup_seconds: DEFAULT_DEDUP_SECONDS,
            target_fa_per_hour: 0.3,
            enrollment_seed: 0,
        }
    }
}

impl EvalSection {
    pub fn hop_samples(&self) -> usize {
        (self.hop_seconds * crate::frontend::SAMPLE_RATE as f64).round() as usize
    }

    pub fn countings(&self) -> [FaCounting; 2] {
        [
            FaCounting::PerWindow,
            FaCounting::Dedup {
                seconds: self.dedup_seconds,
            },
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Relative paths resolve against `QBYE_OUTPUT_ROOT` when set.
    pub output_dir: PathBuf,
    pub data: DataSection,
    pub model: ModelSection,
    pub loss: LossSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
}

/// Command-line replacements for config fields.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub loss: Option<LossKind>,
    pub pool: Option<PoolKind>,
    pub encoder: Option<EncoderKind>,
    pub epochs: Option<usize>,
    pub scale: Option<f64>,
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub manifest_dir: Option<PathBuf>,
}

fn field(name: &str, msg: impl std::fmt::Display) -> AppError {
    AppError::Config(format!("{name}: {msg}"))
}

impl RunConfig {
    pub fn from_toml(text: &str) -> AppResult<Self> {
        toml::from_str(text).map_err(|e| AppError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> AppResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| AppError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)
            .map_err(|e| AppError::Config(format!("{}: {e}", path.display())))?;
        if cfg.data.manifest_dir.is_relative() {
            if let Some(parent) = path.parent() {
                cfg.data.manifest_dir = parent.join(&cfg.data.manifest_dir);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> AppResult<String> {
        toml::to_string(self).map_err(|e| AppError::Config(e.to_string()))
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = o.loss {
            self.loss.kind = v;
        }
        if let Some(v) = o.pool {
            self.model.pooling = v;
        }
        if let Some(v) = o.encoder {
            self.model.encoder = v;
        }
        if let Some(v) = o.epochs {
            self.train.epochs = v;
        }
        if let Some(v) = o.scale {
            self.model.scale = v;
        }
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = &o.output_dir {
            self.output_dir = v.clone();
        }
        if let Some(v) = &o.manifest_dir {
            self.data.manifest_dir = v.clone();
        }
    }

    /// Output directory after applying `QBYE_OUTPUT_ROOT`.
    pub fn output_path(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if self.output_dir.is_relative() => {
                PathBuf::from(root).join(&self.output_dir)
            }
            _ => self.output_dir.clone(),
        }
    }

    pub fn model_config(&self) -> AppResult<ModelConfig> {
        let m = &self.model;
        let family = m.encoder.family();
        let wrong = |section: &str| {
            field(
                &format!("model.{section}"),
                format!("given but encoder is {}", family.name()),
            )
        };
        let encoder = match family {
            EncoderFamily::Liconet => {
                if m.conformer.is_some() {
                    return Err(wrong("conformer"));
                }
                if m.ecapa_tdnn.is_some() {
                    return Err(wrong("ecapa_tdnn"));
                }
                m.liconet
                    .clone()
                    .map_or_else(|| EncoderConfig::reference(family), EncoderConfig::Liconet)
            }
            EncoderFamily::Conformer => {
                if m.liconet.is_some() {
                    return Err(wrong("liconet"));
                }
                if m.ecapa_tdnn.is_some() {
                    return Err(wrong("ecapa_tdnn"));
                }
                m.conformer.clone().map_or_else(
                    || EncoderConfig::reference(family),
                    EncoderConfig::Conformer,
                )
            }
            EncoderFamily::EcapaTdnn => {
                if m.liconet.is_some() {
                    return Err(wrong("liconet"));
                }
                if m.conformer.is_some() {
                    return Err(wrong("conformer"));
                }
                m.ecapa_tdnn.clone().map_or_else(
                    || EncoderConfig::reference(family),
                    EncoderConfig::EcapaTdnn,
                )
            }
        };
        let pooling = match m.pooling {
            PoolKind::Gap => PoolingConfig::Gap(m.gap.clone().unwrap_or_default()),
            PoolKind::Asp => PoolingConfig::Asp(m.asp.clone().unwrap_or_default()),
        };
        let cfg = ModelConfig {
            encoder,
            pooling,
            embedding_dim: m.embedding_dim,
            eval_norm: m.eval_norm,
        };
        Ok(if m.scale == 1.0 {
            cfg
        } else {
            cfg.scaled(m.scale)
        })
    }

    pub fn loss_config(&self) -> HybridLossConfig {
        let l = &self.loss;
        let hybrid = l.kind.is_hybrid();
        HybridLossConfig {
            word_loss: l.kind.word_loss(),
            speaker_weight: if hybrid { l.speaker_weight } else { 0.0 },
            phoneme_weight: if hybrid { l.phoneme_weight } else { 0.0 },
            aam: AamConfig {
                margin: l.aam.margin,
                scale: l.aam.scale,
            },
            softtriple: SoftTripleConfig {
                lambda: l.softtriple.lambda,
                delta: l.softtriple.delta,
                centers_per_class: l.softtriple.centers_per_class,
                gamma: l.softtriple.gamma,
            },
            grl_scale: l.grl_scale,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr_min: t.lr_min,
            lr_max: t.lr_max,
            half_cycle_steps: t.half_cycle_steps,
            beta1: t.beta1,
            beta2: t.beta2,
            adam_eps: t.adam_eps,
            grad_clip: t.grad_clip,
            seed: self.seed,
        }
    }

    /// Field-level checks of every section; the first violation is reported.
    pub fn validate(&self) -> AppResult<()> {
        let m = &self.model;
        if !(m.scale > 0.0 && m.scale.is_finite()) {
            return Err(field("model.scale", format!("{} must be > 0", m.scale)));
        }
        if m.embedding_dim == 0 {
            return Err(field("model.embedding_dim", "must be >= 1"));
        }
        if let Some(g) = &m.gap {
            for (i, r) in g.pooling_ratios.iter().enumerate() {
                if !(*r > 0.0 && *r <= 1.0) {
                    return Err(field(
                        &format!("model.gap.pooling_ratios[{i}]"),
                        format!("{r} outside (0, 1]"),
                    ));
                }
            }
        }
        if m.pooling == PoolKind::Gap && m.asp.is_some() {
            return Err(field("model.asp", "given but pooling is gap"));
        }
        if m.pooling == PoolKind::Asp && m.gap.is_some() {
            return Err(field("model.gap", "given but pooling is asp"));
        }
        self.model_config()?
            .validate()
            .map_err(|e| field("model", e))?;
        let l = &self.loss;
        for (name, v) in [
            ("loss.speaker_weight", l.speaker_weight),
            ("loss.phoneme_weight", l.phoneme_weight),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(field(name, format!("{v} must be >= 0")));
            }
        }
        if !(l.grl_scale > 0.0) {
            return Err(field(
                "loss.grl_scale",
                format!("{} must be > 0", l.grl_scale),
            ));
        }
        self.loss_config()
            .validate()
            .map_err(|e| field("loss", e))?;
        if self.train.threads == 0 {
            return Err(field("train.threads", "must be >= 1"));
        }
        self.train_config()
            .validate()
            .map_err(|e| field("train", e))?;
        if self.data.max_words == 0 {
            return Err(field("data.max_words", "must be >= 1"));
        }
        let e = &self.eval;
        if e.enrollment_size == 0 {
            return Err(field("eval.enrollment_size", "must be >= 1"));
        }
        if e.hop_samples() == 0 {
            return Err(field(
                "eval.hop_seconds",
                format!("{} is below one sample", e.hop_seconds),
            ));
        }
        if !(e.dedup_seconds >= 0.0) {
            return Err(field(
                "eval.dedup_seconds",
                format!("{} must be >= 0", e.dedup_seconds),
            ));
        }
        if !(e.target_fa_per_hour >= 0.0) {
            return Err(field(
                "eval.target_fa_per_hour",
                format!("{} must be >= 0", e.target_fa_per_hour),
            ));
        }
        Ok(())
    }
}
