use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Ctx, Linear};
use crate::params::{ParamBuilder, ParamId};
use crate::profiling::{matmul_flops, softmax_flops, CostReport};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapConfig {
    /// Spectral, temporal and spectro-temporal retention ratios.
    pub pooling_ratios: [f64; 3],
    /// Width of the frame projection that is split into spectral sub-bands.
    pub projection_dim: usize,
    pub spectral_groups: usize,
    /// Frames averaged into one temporal node.
    pub temporal_chunk: usize,
    /// Common width of the fused spectro-temporal graph.
    pub fused_dim: usize,
}

impl Default for GapConfig {
    fn default() -> Self {
        GapConfig {
            pooling_ratios: [0.71, 0.86, 0.71],
            projection_dim: 128,
            spectral_groups: 8,
            temporal_chunk: 4,
            fused_dim: 64,
        }
    }
}

impl GapConfig {
    pub fn scaled(&self, scale: f64) -> Self {
        let g = self.spectral_groups;
        let s = |c: usize| crate::params::scale_count(c, scale);
        GapConfig {
            projection_dim: s(self.projection_dim).div_ceil(g).max(1) * g,
            fused_dim: s(self.fused_dim),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, r) in ["spectral", "temporal", "spectro-temporal"]
            .iter()
            .zip(self.pooling_ratios)
        {
            if !(r > 0.0 && r <= 1.0) {
                return Err(Error::Config(format!(
                    "{name} pooling ratio {r} outside (0, 1]"
                )));
            }
        }
        if self.projection_dim == 0
            || self.spectral_groups == 0
            || self.temporal_chunk == 0
            || self.fused_dim == 0
        {
            return Err(Error::Config("gap counts must be >= 1".into()));
        }
        if self.projection_dim % self.spectral_groups != 0 {
            return Err(Error::Config(format!(
                "projection_dim {} not divisible by spectral_groups {}",
                self.projection_dim, self.spectral_groups
            )));
        }
        Ok(())
    }
}

/// Nodes kept by top-k graph pooling: `max(1, ceil(ratio · n))`.
pub fn retained_nodes(n: usize, ratio: f64) -> usize {
    // The epsilon keeps products such as 0.71·100 from rounding up past the integer.
    let k = libm::ceil(ratio * n as f64 - 1e-9) as usize;
    k.clamp(1, n.max(1))
}

/// Indices of the `k` highest scores, returned in ascending index order.
/// Ties go to the lower index.
pub fn top_k_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    order.sort_unstable();
    order
}

/// Graph attention over a fully connected graph: pairwise scores
/// `tanh((x_i ⊙ a)·x_j)`, row softmax, then `silu(A·X·W + X·W_res + b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphAttention {
    pub name: String,
    pub att: ParamId,
    pub aggregate: Linear,
    pub residual: Linear,
    pub d_in: usize,
    pub d_out: usize,
}

impl GraphAttention {
    fn new(pb: &mut ParamBuilder<'_>, name: &str, d_in: usize, d_out: usize) -> Self {
        let att = pb.uniform(&format!("{name}.att"), 1, d_in, d_in);
        GraphAttention {
            name: if pb.prefix().is_empty() {
                name.into()
            } else {
                format!("{}.{name}", pb.prefix())
            },
            att,
            aggregate: Linear::new(pb, &format!("{name}.aggregate"), d_in, d_out, false),
            residual: Linear::new(pb, &format!("{name}.residual"), d_in, d_out, true),
            d_in,
            d_out,
        }
    }

    /// Row-stochastic `N × N` attention map.
    pub fn attention_map<'a>(&self, tape: &mut Tape<'a>, ctx: &Ctx<'a>, x: Var) -> Var {
        let n = tape.value(x).rows();
        if ctx.probe.uniform_attention {
            return tape.constant(Tensor::full(n, n, 1.0 / n as f64));
        }
        let a = tape.param(ctx.store, self.att);
        let xa = tape.mul_row(x, a);
        let e = tape.matmul_nt(xa, x);
        let e = tape.tanh(e);
        tape.softmax_rows(e)
    }

    pub fn forward<'a>(&self, tape: &mut Tape<'a>, ctx: &Ctx<'a>, x: Var) -> Var {
        let attn = self.attention_map(tape, ctx, x);
        let m = tape.matmul(attn, x);
        let agg = self.aggregate.forward(tape, ctx, m);
        let res = self.residual.forward(tape, ctx, x);
        let h = tape.add(agg, res);
        tape.silu(h)
    }

    fn cost(&self, n: usize, report: &mut CostReport) {
        let flops = 2 * matmul_flops(n, self.d_in, n) + softmax_flops(n * n);
        report.push(format!("{}.attention", self.name), self.d_in, flops);
        self.aggregate.cost(n, report);
        self.residual.cost(n, report);
    }
}

/// Top-k node selection gated by a learned sigmoid score.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphPool {
    pub score: Linear,
    pub ratio: f64,
}

impl GraphPool {
    fn new(pb: &mut ParamBuilder<'_>, name: &str, dim: usize, ratio: f64) -> Self {
        GraphPool {
            score: Linear::new(pb, &format!("{name}.score"), dim, 1, true),
            ratio,
        }
    }

    pub fn forward<'a>(&self, tape: &mut Tape<'a>, ctx: &Ctx<'a>, x: Var) -> Var {
        let s = self.score.forward(tape, ctx, x);
        let s = tape.sigmoid(s);
        let n = tape.value(x).rows();
        let idx = top_k_indices(tape.value(s).data(), retained_nodes(n, self.ratio));
        let kept = tape.gather_rows(x, &idx);
        let gate = tape.gather_rows(s, &idx);
        tape.mul_col(kept, gate)
    }
}

/// Node counts `(in, kept)` for the spectral, temporal and fused graphs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GapNodeCounts {
    pub spectral: (usize, usize),
    pub temporal: (usize, usize),
    pub fused: (usize, usize),
}

/// Spectro-temporal graph attentive pooling.
///
/// Frames are projected to `P` channels. Spectral nodes are the `S` sub-bands
/// of the time-averaged projection; temporal nodes are chunk averages of the
/// projected frames. Each branch runs graph attention then top-k pooling and
/// is mapped to a common width. The fused graph has one node per
/// (spectral, temporal) pair holding their element-wise product; it gets a
/// third attention and pooling stage, a mean readout and a final projection.
#[derive(Clone, Debug, PartialEq)]
pub struct Gap {
    pub project: Linear,
    pub spectral_gat: GraphAttention,
    pub spectral_pool: GraphPool,
    pub spectral_out: Linear,
    pub temporal_gat: GraphAttention,
    pub temporal_pool: GraphPool,
    pub temporal_out: Linear,
    pub fused_gat: GraphAttention,
    pub fused_pool: GraphPool,
    pub readout: Linear,
    pub cfg: GapConfig,
}

impl Gap {
    pub fn new(
        cfg: &GapConfig,
        pb: &mut ParamBuilder<'_>,
        dim: usize,
        embedding_dim: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        pb.set_prefix("pooler");
        let p = cfg.projection_dim;
        let g = p / cfg.spectral_groups;
        let w = cfg.fused_dim;
        let [rs, rt, rf] = cfg.pooling_ratios;
        Ok(Gap {
            project: Linear::new(pb, "project", dim, p, true),
            spectral_gat: GraphAttention::new(pb, "spectral_gat", g, g),
            spectral_pool: GraphPool::new(pb, "spectral_pool", g, rs),
            spectral_out: Linear::new(pb, "spectral_out", g, w, true),
            temporal_gat: GraphAttention::new(pb, "temporal_gat", p, p),
            temporal_pool: GraphPool::new(pb, "temporal_pool", p, rt),
            temporal_out: Linear::new(pb, "temporal_out", p, w, true),
            fused_gat: GraphAttention::new(pb, "fused_gat", w, w),
            fused_pool: GraphPool::new(pb, "fused_pool", w, rf),
            readout: Linear::new(pb, "readout", w, embedding_dim, true),
            cfg: cfg.clone(),
        })
    }

    pub fn node_counts(&self, frames: usize) -> GapNodeCounts {
        let [rs, rt, rf] = self.cfg.pooling_ratios;
        let s = self.cfg.spectral_groups;
        let t = frames.div_ceil(self.cfg.temporal_chunk);
        let (s_kept, t_kept) = (retained_nodes(s, rs), retained_nodes(t, rt));
        let f = s_kept * t_kept;
        GapNodeCounts {
            spectral: (s, s_kept),
            temporal: (t, t_kept),
            fused: (f, retained_nodes(f, rf)),
        }
    }

    /// Input nodes of the fused graph.
    pub fn fused_nodes<'a>(&self, tape: &mut Tape<'a>, ctx: &Ctx<'a>, x: Var) -> Var {
        let h = self.project.forward(tape, ctx, x);
        let groups = self.cfg.spectral_groups;
        let width = self.cfg.projection_dim / groups;

        let band = tape.mean_rows(h);
        let spectral = tape.reshape(band, groups, width);
        let spectral = self.spectral_gat.forward(tape, ctx, spectral);
        let spectral = self.spectral_pool.forward(tape, ctx, spectral);
        let spectral = self.spectral_out.forward(tape, ctx, spectral);

        let temporal = tape.avg_pool_rows(h, self.cfg.temporal_chunk);
        let temporal = self.temporal_gat.forward(tape, ctx, temporal);
        let temporal = self.temporal_pool.forward(tape, ctx, temporal);
        let temporal = self.temporal_out.forward(tape, ctx, temporal);

        tape.outer_rows(spectral, temporal)
    }

    pub fn forward<'a>(&self, tape: &mut Tape<'a>, ctx: &Ctx<'a>, x: Var) -> Var {
        let fused = self.fused_nodes(tape, ctx, x);
        let fused = self.fused_gat.forward(tape, ctx, fused);
        let fused = self.fused_pool.forward(tape, ctx, fused);
        let summary = tape.mean_rows(fused);
        self.readout.forward(tape, ctx, summary)
    }

    pub fn cost(&self, frames: usize, report: &mut CostReport) {
        let counts = self.node_counts(frames);
        self.project.cost(frames, report);
        self.spectral_gat.cost(counts.spectral.0, report);
        self.spectral_pool.score.cost(counts.spectral.0, report);
        self.spectral_out.cost(counts.spectral.1, report);
        self.temporal_gat.cost(counts.temporal.0, report);
        self.temporal_pool.score.cost(counts.temporal.0, report);
        self.temporal_out.cost(counts.temporal.1, report);
        self.fused_gat.cost(counts.fused.0, report);
        self.fused_pool.score.cost(counts.fused.0, report);
        self.readout.cost(1, report);
    }
}
