//! Conformer encoder. Each block runs half-step feed-forward, multi-head
//! self-attention with a learned relative-position bias, a depthwise
//! convolution module and a second half-step feed-forward, then a final
//! layer norm.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Ctx, DepthwiseConv1d, LayerNorm, Linear};
use crate::params::{ParamBuilder, ParamId};
use crate::profiling::{matmul_flops, softmax_flops, CostReport};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConformerConfig {
    pub input_dim: usize,
    pub depth: usize,
    pub attention_dim: usize,
    pub num_heads: usize,
    pub ffn_hidden: usize,
    pub kernel_size: usize,
    /// Offsets beyond ±this share one bias entry.
    pub max_relative_position: usize,
}

impl ConformerConfig {
    /// Two heads, 128-wide attention, 192 hidden units, kernel 7; six blocks.
    pub fn reference() -> Self {
        ConformerConfig {
            input_dim: 40,
            depth: 6,
            attention_dim: 128,
            num_heads: 2,
            ffn_hidden: 192,
            kernel_size: 7,
            max_relative_position: 64,
        }
    }

    /// Widths scale with `scale` and stay divisible by the head count.
    pub fn scaled(&self, scale: f64) -> Self {
        let heads = self.num_heads;
        let s = |c: usize| crate::params::scale_count(c, scale);
        let mut cfg = self.clone();
        cfg.attention_dim = s(self.attention_dim).div_ceil(heads).max(1) * heads;
        cfg.ffn_hidden = s(self.ffn_hidden);
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.input_dim,
            self.depth,
            self.attention_dim,
            self.num_heads,
            self.ffn_hidden,
            self.kernel_size,
        ];
        if counts.contains(&0) {
            return Err(Error::Config("conformer counts must be >= 1".into()));
        }
        if self.attention_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "attention_dim {} not divisible by num_heads {}",
                self.attention_dim, self.num_heads
            )));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::Config("conformer kernel_size must be odd".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward {
    pub norm: LayerNorm,
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    fn new(pb: &mut ParamBuilder<'_>, dim: usize, hidden: usize) -> Self {
        FeedForward {
            norm: LayerNorm::new(pb, "norm", dim),
            up: Linear::new(pb, "up", dim, hidden, true),
            down: Linear::new(pb, "down", hidden, dim, true),
        }
    }

    pub fn forward<'a>(&self, tape: &mut Tape<'a>, ctx: &Ctx<'a>, x: Var) -> Var {
        let h = self.norm.forward(tape, ctx, x);
        let h = self.up.forward(tape, ctx, h);
        let h = tape.silu(h);
        self.down.forward(tape, ctx, h)
    }

    fn cost(&self, t: usize, report: &mut CostReport) {
        self.norm.cost(report);
        self.up.cost(t, report);
        self.down.cost(t, report);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelfAttention {
    pub name: alloc::string::String,
    pub norm: LayerNorm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub rel_bias: Vec<ParamId>,
    pub heads: usize,
    pub dim: usize,
    pub max_rel: usize,
}

impl SelfAttention {
    fn new(pb: &mut ParamBuilder<'_>, dim: usize, heads: usize, max_rel: usize) -> Self {
        let name = pb.prefix().into();
        let rel_bias = (0..heads)
            .map(|h| pb.constant(&format!("rel_bias{h}"), Tensor::zeros(1, 2 * max_rel + 1)))
            .collect();
        SelfAttention {
            name,
            norm: LayerNorm::new(pb, "norm", dim),
            query: Linear::new(pb, "query", dim, dim, true),
            key: Linear::new(pb, "key", dim, dim, true),
            value: Linear::new(pb, "value", dim, dim, true),
            out: Linear::new(pb, "out", dim, dim, true),
            rel_bias,
            heads,
            dim,
            max_rel,
        }
    }

    pub fn forward<'a>(&self, tape: &mut Tape<'a>, ctx: &Ctx<'a>, x: Var) -> Var {
        let h = self.norm.forward(tape, ctx, x);
        let q = self.query.forward(tape, ctx, h);
        let k = self.key.forward(tape, ctx, h);
        let v = self.value.forward(tape, ctx, h);
        let dh = self.dim / self.heads;
        let inv_sqrt = 1.0 / libm::sqrt(dh as f64);
        let mut heads = Vec::with_capacity(self.heads);
        for (i, &table) in self.rel_bias.iter().enumerate() {
            let qh = tape.slice_cols(q, i * dh, dh);
            let kh = tape.slice_cols(k, i * dh, dh);
            let vh = tape.slice_cols(v, i * dh, dh);
            let scores = tape.matmul_nt(qh, kh);
            let scores = tape.scale(scores, inv_sqrt);
            let table = tape.param(ctx.store, table);
            let scores = tape.rel_bias(scores, table, self.max_rel);
            let attn = tape.softmax_rows(scores);
            heads.push(tape.matmul(attn, vh));
        }
        let merged = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)
        };
        self.out.forward(tape, ctx, merged)
    }

    fn cost(&self, t: usize, report: &mut CostReport) {
        self.norm.cost(report);
        self.query.cost(t, report);
        self.key.cost(t, report);
        self.value.cost(t, report);
        let dh = self.dim / self.heads;
        let bias_params = self.heads * (2 * self.max_rel + 1);
        let flops = self.heads as u64 * (2 * matmul_flops(t, dh, t) + softmax_flops(t * t));
        report.push(format!("{}.scores", self.name), bias_params, flops);
        self.out.cost(t, report);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvModule {
    pub norm: LayerNorm,
    pub expand: Linear,
    pub depthwise: DepthwiseConv1d,
    pub bn: BatchNorm,
    pub project: Linear,
}

impl ConvModule {
    fn new(pb: &mut ParamBuilder<'_>, dim: usize, kernel: usize) -> Self {
        ConvModule {
            norm: LayerNorm::new(pb, "norm", dim),
            expand: Linear::new(pb, "expand", dim, 2 * dim, true),
            depthwise: DepthwiseConv1d::new(pb, "depthwise", dim, kernel),
            bn: BatchNorm::new(pb, "bn", dim),
            project: Linear::new(pb, "project", dim, dim, true),
        }
    }

    pub fn forward<'a>(&self, tape: &mut Tape<'a>, ctx: &Ctx<'a>, x: Var) -> Var {
        let h = self.norm.forward(tape, ctx, x);
        let h = self.expand.forward(tape, ctx, h);
        let h = tape.glu(h);
        let h = self.depthwise.forward(tape, ctx, h);
        let h = self.bn.forward(tape, ctx, h);
        let h = tape.silu(h);
        self.project.forward(tape, ctx, h)
    }

    fn cost(&self, t: usize, report: &mut CostReport) {
        self.norm.cost(report);
        self.expand.cost(t, report);
        self.depthwise.cost(t, report);
        self.bn.cost(report);
        self.project.cost(t, report);
    }
}

/// The four sub-modules of a block, in execution order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConformerStage {
    FeedForwardIn,
    SelfAttention,
    Convolution,
    FeedForwardOut,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConformerBlock {
    pub ff_in: FeedForward,
    pub attention: SelfAttention,
    pub conv: ConvModule,
    pub ff_out: FeedForward,
    pub final_norm: LayerNorm,
}

impl ConformerBlock {
    pub const ORDER: [ConformerStage; 4] = [
        ConformerStage::FeedForwardIn,
        ConformerStage::SelfAttention,
        ConformerStage::Convolution,
        ConformerStage::FeedForwardOut,
    ];

    /// Runs the block, reporting each sub-module's residual input to `trace`.
    pub fn forward_traced<'a>(
        &self,
        tape: &mut Tape<'a>,
        ctx: &Ctx<'a>,
        x: Var,
        trace: &mut dyn FnMut(ConformerStage, Var),
    ) -> Var {
        let mut h = x;
        for stage in Self::ORDER {
            trace(stage, h);
            let (delta, weight) = match stage {
                ConformerStage::FeedForwardIn => (self.ff_in.forward(tape, ctx, h), 0.5),
                ConformerStage::SelfAttention => (self.attention.forward(tape, ctx, h), 1.0),
                ConformerStage::Convolution => (self.conv.forward(tape, ctx, h), 1.0),
                ConformerStage::FeedForwardOut => (self.ff_out.forward(tape, ctx, h), 0.5),
            };
            let delta = if weight == 1.0 {
                delta
            } else {
                tape.scale(delta, weight)
            };
            h = tape.add(h, delta);
        }
        self.final_norm.forward(tape, ctx, h)
    }

    pub fn forward<'a>(&self, tape: &mut Tape<'a>, ctx: &Ctx<'a>, x: Var) -> Var {
        self.forward_traced(tape, ctx, x, &mut |_, _| {})
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conformer {
    pub input: Linear,
    pub blocks: Vec<ConformerBlock>,
    dim: usize,
}

impl Conformer {
    pub fn new(cfg: &ConformerConfig, pb: &mut ParamBuilder<'_>) -> Result<Self> {
        cfg.validate()?;
        pb.set_prefix("encoder");
        let input = Linear::new(pb, "input", cfg.input_dim, cfg.attention_dim, true);
        let d = cfg.attention_dim;
        let blocks = (0..cfg.depth)
            .map(|i| {
                let base = format!("encoder.block{i}");
                pb.set_prefix(&format!("{base}.ff_in"));
                let ff_in = FeedForward::new(pb, d, cfg.ffn_hidden);
                pb.set_prefix(&format!("{base}.attention"));
                let attention = SelfAttention::new(pb, d, cfg.num_heads, cfg.max_relative_position);
                pb.set_prefix(&format!("{base}.conv"));
                let conv = ConvModule::new(pb, d, cfg.kernel_size);
                pb.set_prefix(&format!("{base}.ff_out"));
                let ff_out = FeedForward::new(pb, d, cfg.ffn_hidden);
                pb.set_prefix(&base);
                let final_norm = LayerNorm::new(pb, "final_norm", d);
                ConformerBlock {
                    ff_in,
                    attention,
                    conv,
                    ff_out,
                    final_norm,
                }
            })
            .collect();
        Ok(Conformer {
            input,
            blocks,
            dim: d,
        })
    }

    pub fn forward<'a>(&self, tape: &mut Tape<'a>, ctx: &Ctx<'a>, x: Var) -> Var {
        let mut h = self.input.forward(tape, ctx, x);
        for b in &self.blocks {
            h = b.forward(tape, ctx, h);
        }
        h
    }

    pub fn out_dim(&self) -> usize {
        self.dim
    }

    pub fn cost(&self, t: usize, report: &mut CostReport) {
        self.input.cost(t, report);
        for b in &self.blocks {
            b.ff_in.cost(t, report);
            b.attention.cost(t, report);
            b.conv.cost(t, report);
            b.ff_out.cost(t, report);
            b.final_norm.cost(report);
        }
    }
}
