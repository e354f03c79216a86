//! Encoder, pooler and classifier heads bound to one parameter store.

use alloc::format;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{Encoder, EncoderConfig, EncoderFamily};
use crate::error::{Error, Result};
use crate::losses::{
    cosine_logits, hybrid_loss, HeadDims, Heads, HybridLossConfig, Labels, WordLoss,
};
use crate::nn::{Ctx, EvalNorm, Mode, Probe};
use crate::params::{Group, Kind, ParamBuilder, ParamStore};
use crate::pooling::{AspConfig, GapConfig, Pooler, PoolingConfig};
use crate::profiling::CostReport;
use crate::tape::{BnUpdate, Tape, Var};
use crate::tensor::Tensor;

/// Frames in one standardized two-second segment.
pub const SEGMENT_FRAMES: usize = 198;

/// Utterance embedding width of the full-size models.
pub const EMBEDDING_DIM: usize = 128;

/// Default running-statistics momentum of batch normalisation.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub pooling: PoolingConfig,
    pub embedding_dim: usize,
    /// Training normalises each utterance by its own statistics, so
    /// inference does the same unless running statistics are requested.
    #[serde(default)]
    pub eval_norm: EvalNorm,
}

impl ModelConfig {
    /// Full-size encoder with its shipped pooler: GAP for LiCoNet and
    /// Conformer, ASP for ECAPA_TDNN.
    pub fn reference(family: EncoderFamily) -> Self {
        let pooling = match family {
            EncoderFamily::Liconet | EncoderFamily::Conformer => {
                PoolingConfig::Gap(GapConfig::default())
            }
            EncoderFamily::EcapaTdnn => PoolingConfig::Asp(AspConfig::default()),
        };
        ModelConfig {
            encoder: EncoderConfig::reference(family),
            pooling,
            embedding_dim: EMBEDDING_DIM,
            eval_norm: EvalNorm::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.pooling.validate()?;
        if self.embedding_dim == 0 {
            return Err(Error::Config("embedding_dim must be >= 1".into()));
        }
        Ok(())
    }

    /// Shrinks every width by `scale`; the embedding width is kept.
    pub fn scaled(&self, scale: f64) -> Self {
        ModelConfig {
            encoder: self.encoder.scaled(scale),
            pooling: self.pooling.scaled(scale),
            embedding_dim: self.embedding_dim,
            eval_norm: self.eval_norm,
        }
    }
}

/// Differentiable nodes of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub frames: Var,
    pub embedding: Var,
}

/// Loss values of one utterance, as plain numbers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub word: f64,
    pub speaker: Option<f64>,
    pub phoneme: Option<f64>,
    pub total: f64,
}

/// Loss values and parameter gradients for one utterance.
#[derive(Clone, Debug)]
pub struct ExampleGrad {
    pub loss: LossValues,
    /// One tensor per store entry, zero for buffers and unused parameters.
    pub grads: Vec<Tensor>,
    pub bn_updates: Vec<BnUpdate>,
}

#[derive(Clone, Debug)]
pub struct KwsModel {
    pub config: ModelConfig,
    pub dims: HeadDims,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub pooler: Pooler,
    pub heads: Heads,
    /// Center blending temperature of the SoftTriple word head.
    pub softtriple_gamma: f64,
}

impl KwsModel {
    pub fn new(
        config: &ModelConfig,
        loss: &HybridLossConfig,
        dims: HeadDims,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        loss.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pb = ParamBuilder::new(&mut store, &mut rng, Group::Encoder);
        let encoder = Encoder::new(&config.encoder, &mut pb)?;
        pb.group(Group::Pooler);
        let pooler = Pooler::new(
            &config.pooling,
            &mut pb,
            encoder.out_dim(),
            config.embedding_dim,
        )?;
        let heads = Heads::new(&mut pb, loss, dims, config.embedding_dim, encoder.out_dim());
        Ok(KwsModel {
            config: config.clone(),
            dims,
            store,
            encoder,
            pooler,
            heads,
            softtriple_gamma: loss.softtriple.gamma,
        })
    }

    pub fn forward<'a>(&self, tape: &mut Tape<'a>, ctx: &Ctx<'a>, features: Var) -> Forward {
        let frames = self.encoder.forward(tape, ctx, features);
        let embedding = self.pooler.forward(tape, ctx, frames);
        Forward { frames, embedding }
    }

    fn check_features(&self, features: &Tensor) -> Result<()> {
        let want = self.config.encoder.input_dim();
        if features.cols() != want || features.rows() == 0 {
            return Err(Error::Dimension(format!(
                "features are {}x{}, model expects Tx{want}",
                features.rows(),
                features.cols()
            )));
        }
        Ok(())
    }

    /// Inference-mode utterance embedding.
    pub fn embed(&self, features: &Tensor) -> Result<Vec<f64>> {
        self.embed_with(features, Probe::default())
    }

    pub fn embed_with(&self, features: &Tensor, probe: Probe) -> Result<Vec<f64>> {
        self.check_features(features)?;
        let ctx = Ctx::new(&self.store, Mode::Eval)
            .with_probe(probe)
            .with_eval_norm(self.config.eval_norm);
        let mut tape = Tape::new();
        let x = tape.constant(features.clone());
        let out = self.forward(&mut tape, &ctx, x);
        let e = tape.value(out.embedding);
        if !e.is_finite() {
            return Err(Error::NonFinite("embedding".into()));
        }
        Ok(e.data().to_vec())
    }

    /// Eval-mode word-head scores of one utterance: cosine (AAM), blended
    /// center similarity (SoftTriple) or linear logits (CE).
    pub fn word_scores(&self, features: &Tensor) -> Result<Vec<f64>> {
        self.check_features(features)?;
        let ctx = Ctx::new(&self.store, Mode::Eval).with_eval_norm(self.config.eval_norm);
        let mut tape = Tape::new();
        let x = tape.constant(features.clone());
        let out = self.forward(&mut tape, &ctx, x);
        let head = &self.heads.word;
        let w = tape.param(&self.store, head.weight);
        let scores = match self.heads.word_loss {
            WordLoss::Aam => cosine_logits(&mut tape, out.embedding, w)?,
            WordLoss::SoftTriple => {
                let cos = cosine_logits(&mut tape, out.embedding, w)?;
                tape.group_softmax_sum(cos, head.centers, self.softtriple_gamma)
            }
            WordLoss::Ce => {
                let b = tape.param(&self.store, head.bias.expect("ce head has a bias"));
                let y = tape.matmul(out.embedding, w);
                tape.add_row(y, b)
            }
        };
        Ok(tape.value(scores).data().to_vec())
    }

    /// Index of the highest word score.
    pub fn predict_word(&self, features: &Tensor) -> Result<usize> {
        let s = self.word_scores(features)?;
        Ok((0..s.len()).fold(0, |best, i| if s[i] > s[best] { i } else { best }))
    }

    /// Training-mode loss and gradients for one utterance. `phonemes` is at
    /// the feature frame rate and is resampled to the encoder output here.
    pub fn example_grad(
        &self,
        features: &Tensor,
        word: Option<usize>,
        speaker: Option<usize>,
        phonemes: Option<&[Option<usize>]>,
        loss: &HybridLossConfig,
    ) -> Result<ExampleGrad> {
        self.check_features(features)?;
        let ctx = Ctx::new(&self.store, Mode::Train);
        let mut tape = Tape::new();
        let x = tape.constant(features.clone());
        let out = self.forward(&mut tape, &ctx, x);
        let resampled = phonemes.map(|p| self.resample_labels(p));
        let labels = Labels {
            word,
            speaker,
            phonemes: resampled.as_deref(),
        };
        let parts = hybrid_loss(
            &mut tape,
            &ctx,
            &self.heads,
            out.embedding,
            out.frames,
            &labels,
            loss,
        )?;
        let scalar = |v: Var| tape.value(v).data()[0];
        let values = LossValues {
            word: scalar(parts.word),
            speaker: parts.speaker.map(scalar),
            phoneme: parts.phoneme.map(scalar),
            total: scalar(parts.total),
        };
        let grads = tape.backward(parts.total).param_grads(&self.store);
        Ok(ExampleGrad {
            loss: values,
            grads,
            bn_updates: tape.take_bn_updates(),
        })
    }

    /// Nearest-frame resampling of per-frame labels to the encoder frame rate.
    pub fn resample_labels(&self, labels: &[Option<usize>]) -> Vec<Option<usize>> {
        resample_labels(
            labels,
            self.encoder.frame_stride(),
            self.encoder.out_frames(labels.len()),
        )
    }

    /// Folds the batch statistics of one step into the running buffers.
    /// Updates for the same buffer are averaged first.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate], momentum: f64) {
        let mut order: Vec<usize> = (0..updates.len()).collect();
        order.sort_by_key(|&i| (updates[i].mean_id.0, i));
        let mut i = 0;
        while i < order.len() {
            let first = &updates[order[i]];
            let mut j = i;
            let mut mean = alloc::vec![0.0; first.mean.len()];
            let mut var = alloc::vec![0.0; first.var.len()];
            while j < order.len() && updates[order[j]].mean_id == first.mean_id {
                let u = &updates[order[j]];
                mean.iter_mut().zip(&u.mean).for_each(|(a, b)| *a += b);
                var.iter_mut().zip(&u.var).for_each(|(a, b)| *a += b);
                j += 1;
            }
            let n = (j - i) as f64;
            for (buf, batch) in [(first.mean_id, &mean), (first.var_id, &var)] {
                let running = self.store.get_mut(buf).data_mut();
                for (r, b) in running.iter_mut().zip(batch) {
                    *r = (1.0 - momentum) * *r + momentum * b / n;
                }
            }
            i = j;
        }
    }

    /// Trainable element count of encoder and pooler; heads excluded.
    pub fn count_params(&self) -> usize {
        self.store.trainable_count(false)
    }

    /// Per-layer cost of one forward pass over `frames` feature frames.
    pub fn cost_report(&self, frames: usize) -> CostReport {
        let mut report = CostReport::new();
        self.encoder.cost(frames, &mut report);
        self.pooler
            .cost(self.encoder.out_frames(frames), &mut report);
        report
    }

    pub fn count_flops(&self) -> u64 {
        self.cost_report(SEGMENT_FRAMES).flops()
    }

    /// Trainable parameters, in store order.
    pub fn trainable_ids(&self) -> impl Iterator<Item = crate::params::ParamId> + '_ {
        self.store
            .ids()
            .filter(|&id| self.store.entry(id).kind == Kind::Trainable)
    }
}

/// Output frame `j` takes the label of input frame `min(j·stride, T−1)`.
pub fn resample_labels(
    labels: &[Option<usize>],
    stride: usize,
    out_frames: usize,
) -> Vec<Option<usize>> {
    if labels.is_empty() {
        return Vec::new();
    }
    (0..out_frames)
        .map(|j| labels[(j * stride).min(labels.len() - 1)])
        .collect()
}
