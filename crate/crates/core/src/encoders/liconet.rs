//! LiCoNet: a stack of inverted-bottleneck blocks, each one temporal
//! convolution followed by two pointwise convolutions.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv1d, Ctx, Linear};
use crate::params::ParamBuilder;
use crate::profiling::CostReport;
use crate::tape::{Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LicoBlockSpec {
    pub channels: usize,
    pub stride: usize,
    pub residual: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LiconetConfig {
    pub input_dim: usize,
    pub stem_channels: usize,
    pub kernel_size: usize,
    pub expansion_factor: usize,
    pub blocks: Vec<LicoBlockSpec>,
}

impl LiconetConfig {
    /// Five blocks, expansion 6, kernel 5, constant width 43. The first two
    /// blocks subsample time by 4 and 2.
    pub fn reference() -> Self {
        Self::uniform(43, &[4, 2, 1, 1, 1])
    }

    /// Constant-width plan; residuals wherever a block keeps its shape.
    pub fn uniform(width: usize, strides: &[usize]) -> Self {
        let blocks = strides
            .iter()
            .map(|&stride| LicoBlockSpec {
                channels: width,
                stride,
                residual: stride == 1,
            })
            .collect();
        LiconetConfig {
            input_dim: 40,
            stem_channels: width,
            kernel_size: 5,
            expansion_factor: 6,
            blocks,
        }
    }

    pub fn scaled(&self, scale: f64) -> Self {
        let s = |c: usize| crate::params::scale_count(c, scale);
        let mut cfg = self.clone();
        cfg.stem_channels = s(cfg.stem_channels);
        for b in &mut cfg.blocks {
            b.channels = s(b.channels);
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0
            || self.stem_channels == 0
            || self.kernel_size == 0
            || self.expansion_factor == 0
        {
            return Err(Error::Config("liconet counts must be >= 1".into()));
        }
        if self.blocks.is_empty() {
            return Err(Error::Config("liconet needs at least one block".into()));
        }
        let mut width = self.stem_channels;
        for (i, b) in self.blocks.iter().enumerate() {
            if b.channels == 0 || b.stride == 0 {
                return Err(Error::Config(format!(
                    "liconet block {i}: counts must be >= 1"
                )));
            }
            if b.residual && (b.channels != width || b.stride != 1) {
                return Err(Error::Config(format!(
                    "liconet block {i}: residual path channel mismatch ({width} -> {} at stride {})",
                    b.channels, b.stride
                )));
            }
            width = b.channels;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LicoBlock {
    pub temporal: Conv1d,
    pub temporal_bn: BatchNorm,
    pub pointwise: Conv1d,
    pub pointwise_bn: BatchNorm,
    pub project: Conv1d,
    pub project_bn: BatchNorm,
    pub residual: bool,
}

impl LicoBlock {
    pub fn forward<'a>(&self, tape: &mut Tape<'a>, ctx: &Ctx<'a>, x: Var) -> Var {
        let h = self.temporal.forward(tape, ctx, x);
        let h = self.temporal_bn.forward(tape, ctx, h);
        let h = tape.relu(h);
        let h = self.pointwise.forward(tape, ctx, h);
        let h = self.pointwise_bn.forward(tape, ctx, h);
        let h = tape.relu(h);
        let h = self.project.forward(tape, ctx, h);
        let h = self.project_bn.forward(tape, ctx, h);
        if self.residual {
            tape.add(x, h)
        } else {
            h
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Liconet {
    pub stem: Linear,
    pub blocks: Vec<LicoBlock>,
    out_dim: usize,
}

impl Liconet {
    pub fn new(cfg: &LiconetConfig, pb: &mut ParamBuilder<'_>) -> Result<Self> {
        cfg.validate()?;
        pb.set_prefix("encoder");
        let stem = Linear::new(pb, "stem", cfg.input_dim, cfg.stem_channels, true);
        let mut width = cfg.stem_channels;
        let mut blocks = Vec::with_capacity(cfg.blocks.len());
        for (i, spec) in cfg.blocks.iter().enumerate() {
            pb.set_prefix(&format!("encoder.block{i}"));
            let hidden = width * cfg.expansion_factor;
            blocks.push(LicoBlock {
                temporal: Conv1d::new(
                    pb,
                    "temporal",
                    width,
                    hidden,
                    cfg.kernel_size,
                    spec.stride,
                    1,
                    true,
                ),
                temporal_bn: BatchNorm::new(pb, "temporal_bn", hidden),
                pointwise: Conv1d::new(pb, "pointwise", hidden, hidden, 1, 1, 1, true),
                pointwise_bn: BatchNorm::new(pb, "pointwise_bn", hidden),
                project: Conv1d::new(pb, "project", hidden, spec.channels, 1, 1, 1, true),
                project_bn: BatchNorm::new(pb, "project_bn", spec.channels),
                residual: spec.residual,
            });
            width = spec.channels;
        }
        Ok(Liconet {
            stem,
            blocks,
            out_dim: width,
        })
    }

    pub fn forward<'a>(&self, tape: &mut Tape<'a>, ctx: &Ctx<'a>, x: Var) -> Var {
        let mut h = self.stem.forward(tape, ctx, x);
        for b in &self.blocks {
            h = b.forward(tape, ctx, h);
        }
        h
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn out_frames(&self, t_in: usize) -> usize {
        self.blocks
            .iter()
            .fold(t_in, |t, b| b.temporal.out_frames(t))
    }

    pub fn cost(&self, t_in: usize, report: &mut CostReport) {
        self.stem.cost(t_in, report);
        let mut t = t_in;
        for b in &self.blocks {
            b.temporal.cost(t, report);
            t = b.temporal.out_frames(t);
            b.temporal_bn.cost(report);
            b.pointwise.cost(t, report);
            b.pointwise_bn.cost(report);
            b.project.cost(t, report);
            b.project_bn.cost(report);
        }
    }
}
