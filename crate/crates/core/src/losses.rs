//! Word, speaker and phoneme objectives and their multi-task combination.
//!
//! Every loss here is a mean over the labelled rows of its input, so a
//! batch of one utterance and a sequence of frames share the same code path.

use alloc::format;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Ctx;
use crate::params::{Group, ParamBuilder, ParamId};
use crate::tape::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AamConfig {
    /// Additive angle on the target class, radians.
    pub margin: f64,
    pub scale: f64,
}

impl Default for AamConfig {
    fn default() -> Self {
        AamConfig {
            margin: 0.2,
            scale: 32.0,
        }
    }
}

impl AamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..core::f64::consts::FRAC_PI_2).contains(&self.margin) {
            return Err(Error::Config(format!(
                "aam margin {} outside [0, pi/2)",
                self.margin
            )));
        }
        if !(self.scale > 0.0) {
            return Err(Error::Config(format!(
                "aam scale {} must be > 0",
                self.scale
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftTripleConfig {
    pub lambda: f64,
    pub delta: f64,
    pub centers_per_class: usize,
    /// Temperature of the softmax that blends the centers of one class.
    pub gamma: f64,
}

impl Default for SoftTripleConfig {
    fn default() -> Self {
        SoftTripleConfig {
            lambda: 60.0,
            delta: 0.03,
            centers_per_class: 10,
            gamma: 0.1,
        }
    }
}

impl SoftTripleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) {
            return Err(Error::Config(format!(
                "softtriple lambda {} must be > 0",
                self.lambda
            )));
        }
        if !(self.delta >= 0.0) {
            return Err(Error::Config(format!(
                "softtriple delta {} must be >= 0",
                self.delta
            )));
        }
        if self.centers_per_class == 0 {
            return Err(Error::Config(
                "softtriple centers_per_class must be >= 1".into(),
            ));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::Config(format!(
                "softtriple gamma {} must be > 0",
                self.gamma
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WordLoss {
    Aam,
    #[serde(rename = "softtriple")]
    SoftTriple,
    /// Plain linear classifier with softmax cross-entropy.
    Ce,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HybridLossConfig {
    pub word_loss: WordLoss,
    /// η: weight of the reversed speaker loss.
    pub speaker_weight: f64,
    /// μ: weight of the frame-level phoneme loss.
    pub phoneme_weight: f64,
    /// Shared by the word (when AAM), speaker and phoneme branches.
    pub aam: AamConfig,
    pub softtriple: SoftTripleConfig,
    /// Multiplier on the reversed sensitivity; the adversarial strength lives in η.
    pub grl_scale: f64,
}

impl Default for HybridLossConfig {
    fn default() -> Self {
        HybridLossConfig {
            word_loss: WordLoss::SoftTriple,
            speaker_weight: 0.1,
            phoneme_weight: 0.5,
            aam: AamConfig::default(),
            softtriple: SoftTripleConfig::default(),
            grl_scale: 1.0,
        }
    }
}

impl HybridLossConfig {
    pub fn single_task(word_loss: WordLoss) -> Self {
        HybridLossConfig {
            word_loss,
            speaker_weight: 0.0,
            phoneme_weight: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.speaker_weight >= 0.0) || !(self.phoneme_weight >= 0.0) {
            return Err(Error::Config("loss weights must be >= 0".into()));
        }
        self.aam.validate()?;
        self.softtriple.validate()
    }
}

/// Cosine similarities between the rows of `x` and the columns of `w`.
pub fn cosine_logits<'a>(tape: &mut Tape<'a>, x: Var, w: Var) -> Result<Var> {
    let xn = tape.l2_normalize_rows(x)?;
    let wn = tape.l2_normalize_cols(w)?;
    Ok(tape.matmul(xn, wn))
}

/// Mean additive-angular-margin loss over labelled rows of `x`.
pub fn aam_loss<'a>(
    tape: &mut Tape<'a>,
    x: Var,
    w: Var,
    labels: &[Option<usize>],
    cfg: &AamConfig,
) -> Result<Var> {
    check_labels(labels, tape.value(w).cols())?;
    let cos = cosine_logits(tape, x, w)?;
    let logits = tape.aam_logits(cos, labels, cfg.margin, cfg.scale);
    tape.cross_entropy(logits, labels)
}

/// Mean SoftTriple loss; `w` holds `K` adjacent center columns per class.
pub fn softtriple_loss<'a>(
    tape: &mut Tape<'a>,
    x: Var,
    w: Var,
    labels: &[Option<usize>],
    cfg: &SoftTripleConfig,
) -> Result<Var> {
    let k = cfg.centers_per_class;
    let cols = tape.value(w).cols();
    if cols % k != 0 {
        return Err(Error::Dimension(format!(
            "{cols} center columns not a multiple of K={k}"
        )));
    }
    check_labels(labels, cols / k)?;
    let cos = cosine_logits(tape, x, w)?;
    let sim = tape.group_softmax_sum(cos, k, cfg.gamma);
    let logits = tape.scale_shift_target(sim, labels, cfg.lambda, cfg.delta);
    tape.cross_entropy(logits, labels)
}

/// Softmax cross-entropy over `x·w + b`.
pub fn ce_loss<'a>(
    tape: &mut Tape<'a>,
    x: Var,
    w: Var,
    b: Var,
    labels: &[Option<usize>],
) -> Result<Var> {
    let logits = tape.matmul(x, w);
    let logits = tape.add_row(logits, b);
    tape.cross_entropy(logits, labels)
}

pub fn gradient_reversal<'a>(tape: &mut Tape<'a>, x: Var) -> Var {
    tape.gradient_reversal(x, 1.0)
}

/// Mean frame-level AAM loss; `None` labels are masked out.
pub fn phoneme_loss<'a>(
    tape: &mut Tape<'a>,
    frames: Var,
    w: Var,
    labels: &[Option<usize>],
    cfg: &AamConfig,
) -> Result<Var> {
    if tape.value(frames).rows() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} phoneme labels for {} encoder frames",
            labels.len(),
            tape.value(frames).rows()
        )));
    }
    aam_loss(tape, frames, w, labels, cfg)
}

fn check_labels(labels: &[Option<usize>], classes: usize) -> Result<()> {
    match labels.iter().flatten().find(|&&l| l >= classes) {
        Some(&label) => Err(Error::LabelOutOfRange { label, classes }),
        None => Ok(()),
    }
}

/// A classifier weight matrix, `d × C` (or `d × C·K` for SoftTriple).
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead {
    pub weight: ParamId,
    /// Present only on the baseline-CE head.
    pub bias: Option<ParamId>,
    pub classes: usize,
    pub centers: usize,
}

impl ClassifierHead {
    pub fn cosine(
        pb: &mut ParamBuilder<'_>,
        name: &str,
        dim: usize,
        classes: usize,
        centers: usize,
    ) -> Self {
        let weight = pb.uniform(&format!("{name}.weight"), dim, classes * centers, dim);
        ClassifierHead {
            weight,
            bias: None,
            classes,
            centers,
        }
    }

    pub fn linear(pb: &mut ParamBuilder<'_>, name: &str, dim: usize, classes: usize) -> Self {
        let weight = pb.uniform(&format!("{name}.weight"), dim, classes, dim);
        let bias = pb.uniform(&format!("{name}.bias"), 1, classes, dim);
        ClassifierHead {
            weight,
            bias: Some(bias),
            classes,
            centers: 1,
        }
    }
}

/// Class counts of the three heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadDims {
    pub words: usize,
    pub speakers: usize,
    pub phonemes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Heads {
    pub word: ClassifierHead,
    pub speaker: ClassifierHead,
    pub phoneme: ClassifierHead,
    pub word_loss: WordLoss,
}

impl Heads {
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        cfg: &HybridLossConfig,
        dims: HeadDims,
        embedding_dim: usize,
        frame_dim: usize,
    ) -> Self {
        pb.set_prefix("head");
        pb.group(Group::WordHead);
        let word = match cfg.word_loss {
            WordLoss::Aam => ClassifierHead::cosine(pb, "word", embedding_dim, dims.words, 1),
            WordLoss::SoftTriple => ClassifierHead::cosine(
                pb,
                "word",
                embedding_dim,
                dims.words,
                cfg.softtriple.centers_per_class,
            ),
            WordLoss::Ce => ClassifierHead::linear(pb, "word", embedding_dim, dims.words),
        };
        pb.group(Group::SpeakerHead);
        let speaker = ClassifierHead::cosine(pb, "speaker", embedding_dim, dims.speakers, 1);
        pb.group(Group::PhonemeHead);
        let phoneme = ClassifierHead::cosine(pb, "phoneme", frame_dim, dims.phonemes, 1);
        Heads {
            word,
            speaker,
            phoneme,
            word_loss: cfg.word_loss,
        }
    }
}

/// The label triple of one utterance. Phoneme labels are already at the
/// encoder frame rate.
#[derive(Clone, Copy, Debug, Default)]
pub struct Labels<'l> {
    pub word: Option<usize>,
    pub speaker: Option<usize>,
    pub phonemes: Option<&'l [Option<usize>]>,
}

/// Loss nodes of one forward pass. Disabled branches are `None`.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub word: Var,
    pub speaker: Option<Var>,
    pub phoneme: Option<Var>,
    pub total: Var,
}

/// Word loss on the embedding (a `1 × d` row).
pub fn word_loss<'a>(
    tape: &mut Tape<'a>,
    ctx: &Ctx<'a>,
    head: &ClassifierHead,
    kind: WordLoss,
    embedding: Var,
    label: usize,
    cfg: &HybridLossConfig,
) -> Result<Var> {
    let labels = [Some(label)];
    let w = tape.param(ctx.store, head.weight);
    match kind {
        WordLoss::Aam => aam_loss(tape, embedding, w, &labels, &cfg.aam),
        WordLoss::SoftTriple => softtriple_loss(tape, embedding, w, &labels, &cfg.softtriple),
        WordLoss::Ce => {
            check_labels(&labels, head.classes)?;
            let b = tape.param(ctx.store, head.bias.expect("ce head has a bias"));
            ce_loss(tape, embedding, w, b, &labels)
        }
    }
}

/// `L_word + η·L_spk(grl(e)) + μ·L_phn(frames)`.
///
/// Branches with zero weight are not built, so a single-task run records the
/// same graph as plain word training.
pub fn hybrid_loss<'a>(
    tape: &mut Tape<'a>,
    ctx: &Ctx<'a>,
    heads: &Heads,
    embedding: Var,
    frames: Var,
    labels: &Labels<'_>,
    cfg: &HybridLossConfig,
) -> Result<LossParts> {
    let word_label = labels.word.ok_or(Error::MissingSupervision("word"))?;
    let word = word_loss(
        tape,
        ctx,
        &heads.word,
        heads.word_loss,
        embedding,
        word_label,
        cfg,
    )?;
    let mut total = word;

    let speaker = if cfg.speaker_weight > 0.0 {
        let label = labels.speaker.ok_or(Error::MissingSupervision("speaker"))?;
        let reversed = tape.gradient_reversal(embedding, cfg.grl_scale);
        let w = tape.param(ctx.store, heads.speaker.weight);
        let l = aam_loss(tape, reversed, w, &[Some(label)], &cfg.aam)?;
        let weighted = tape.scale(l, cfg.speaker_weight);
        total = tape.add(total, weighted);
        Some(l)
    } else {
        None
    };

    let phoneme = if cfg.phoneme_weight > 0.0 {
        let phonemes = labels
            .phonemes
            .ok_or(Error::MissingSupervision("phoneme"))?;
        let w = tape.param(ctx.store, heads.phoneme.weight);
        let l = phoneme_loss(tape, frames, w, phonemes, &cfg.aam)?;
        let weighted = tape.scale(l, cfg.phoneme_weight);
        total = tape.add(total, weighted);
        Some(l)
    } else {
        None
    };

    Ok(LossParts {
        word,
        speaker,
        phoneme,
        total,
    })
}
