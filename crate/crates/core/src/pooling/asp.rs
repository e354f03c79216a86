use alloc::format;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Ctx, Linear};
use crate::params::ParamBuilder;
use crate::profiling::{matmul_flops, softmax_flops, CostReport};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Variance floor applied before the square root of the weighted statistics.
pub const VARIANCE_FLOOR: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AspConfig {
    pub bottleneck: usize,
    /// Feed the utterance mean and std to the attention network alongside each frame.
    pub global_context: bool,
}

impl Default for AspConfig {
    fn default() -> Self {
        AspConfig {
            bottleneck: 64,
            global_context: true,
        }
    }
}

impl AspConfig {
    pub fn scaled(&self, scale: f64) -> Self {
        AspConfig {
            bottleneck: crate::params::scale_count(self.bottleneck, scale),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bottleneck == 0 {
            return Err(Error::Config("asp bottleneck must be >= 1".into()));
        }
        Ok(())
    }
}

/// Attentive statistics pooling with channel-wise attention over frames.
#[derive(Clone, Debug, PartialEq)]
pub struct Asp {
    pub attention_in: Linear,
    pub attention_out: Linear,
    pub project: Linear,
    pub global_context: bool,
    pub dim: usize,
}

impl Asp {
    pub fn new(
        cfg: &AspConfig,
        pb: &mut ParamBuilder<'_>,
        dim: usize,
        embedding_dim: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        pb.set_prefix("pooler");
        let ctx_dim = if cfg.global_context { 3 * dim } else { dim };
        Ok(Asp {
            attention_in: Linear::new(pb, "attention_in", ctx_dim, cfg.bottleneck, true),
            attention_out: Linear::new(pb, "attention_out", cfg.bottleneck, dim, true),
            project: Linear::new(pb, "project", 2 * dim, embedding_dim, true),
            global_context: cfg.global_context,
            dim,
        })
    }

    /// Weighted mean and standard deviation under `weights` (`T × D`, columns sum to one).
    fn weighted_stats<'a>(tape: &mut Tape<'a>, x: Var, weights: Var) -> (Var, Var) {
        let t = tape.value(x).rows() as f64;
        let wx = tape.mul(weights, x);
        let mean = tape.mean_rows(wx);
        let mean = tape.scale(mean, t);
        let wxx = tape.mul(wx, x);
        let second = tape.mean_rows(wxx);
        let second = tape.scale(second, t);
        let sq = tape.mul(mean, mean);
        let var = tape.sub(second, sq);
        let std = tape.sqrt_clamp(var, VARIANCE_FLOOR);
        (mean, std)
    }

    /// Attention weights over frames, `T × D`.
    pub fn attention<'a>(&self, tape: &mut Tape<'a>, ctx: &Ctx<'a>, x: Var) -> Var {
        let (t, d) = tape.value(x).shape();
        if ctx.probe.uniform_attention {
            return tape.constant(Tensor::full(t, d, 1.0 / t as f64));
        }
        let input = if self.global_context {
            let uniform = tape.constant(Tensor::full(t, d, 1.0 / t as f64));
            let (mean, std) = Self::weighted_stats(tape, x, uniform);
            let mean = tape.broadcast_rows(mean, t);
            let std = tape.broadcast_rows(std, t);
            tape.concat_cols(&[x, mean, std])
        } else {
            x
        };
        let h = self.attention_in.forward(tape, ctx, input);
        let h = tape.tanh(h);
        let scores = self.attention_out.forward(tape, ctx, h);
        tape.softmax_cols(scores)
    }

    /// Attention-weighted `(mean, std)`, each `1 × D`, before projection.
    pub fn statistics<'a>(&self, tape: &mut Tape<'a>, ctx: &Ctx<'a>, x: Var) -> (Var, Var) {
        let weights = self.attention(tape, ctx, x);
        Self::weighted_stats(tape, x, weights)
    }

    pub fn forward<'a>(&self, tape: &mut Tape<'a>, ctx: &Ctx<'a>, x: Var) -> Var {
        let (mean, std) = self.statistics(tape, ctx, x);
        let stats = tape.concat_cols(&[mean, std]);
        self.project.forward(tape, ctx, stats)
    }

    pub fn cost(&self, t: usize, report: &mut CostReport) {
        self.attention_in.cost(t, report);
        self.attention_out.cost(t, report);
        report.push(
            format!("{}.softmax", "pooler.attention"),
            0,
            softmax_flops(t * self.dim),
        );
        report.push("pooler.statistics", 0, 2 * matmul_flops(1, t, self.dim));
        self.project.cost(1, report);
    }
}
