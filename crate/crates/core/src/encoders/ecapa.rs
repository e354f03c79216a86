//! ECAPA-TDNN trunk: a stem convolution, three SE-Res2 blocks and a
//! multi-layer aggregation convolution. Pooling and the embedding layer live
//! in [`crate::pooling`].

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv1d, Ctx, Linear};
use crate::params::ParamBuilder;
use crate::profiling::CostReport;
use crate::tape::{Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EcapaConfig {
    pub input_dim: usize,
    pub channels: usize,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    pub res2_scale: usize,
    pub res2_kernel: usize,
    /// One entry per SE-Res2 block.
    pub dilations: Vec<usize>,
    pub se_bottleneck: usize,
    pub mfa_channels: usize,
}

impl EcapaConfig {
    /// 128 channels, 64-wide SE bottleneck, Res2 scale 8, aggregation width 3·128.
    pub fn reference() -> Self {
        EcapaConfig {
            input_dim: 40,
            channels: 128,
            stem_kernel: 5,
            stem_stride: 4,
            res2_scale: 8,
            res2_kernel: 3,
            dilations: alloc::vec![2, 3, 4],
            se_bottleneck: 64,
            mfa_channels: 384,
        }
    }

    /// Channel counts stay multiples of the Res2 scale.
    pub fn scaled(&self, scale: f64) -> Self {
        let s = |c: usize| crate::params::scale_count(c, scale);
        let mut cfg = self.clone();
        cfg.channels = s(self.channels).div_ceil(self.res2_scale).max(1) * self.res2_scale;
        cfg.se_bottleneck = s(self.se_bottleneck);
        cfg.mfa_channels = s(self.mfa_channels);
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.input_dim,
            self.channels,
            self.stem_kernel,
            self.stem_stride,
            self.res2_scale,
            self.res2_kernel,
            self.se_bottleneck,
            self.mfa_channels,
        ];
        if counts.contains(&0) || self.dilations.is_empty() || self.dilations.contains(&0) {
            return Err(Error::Config("ecapa_tdnn counts must be >= 1".into()));
        }
        if self.channels % self.res2_scale != 0 {
            return Err(Error::Config(format!(
                "channels {} not divisible by res2_scale {}",
                self.channels, self.res2_scale
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeRes2Block {
    pub conv_in: Conv1d,
    pub bn_in: BatchNorm,
    pub res2: Vec<(Conv1d, BatchNorm)>,
    pub conv_out: Conv1d,
    pub bn_out: BatchNorm,
    pub se_down: Linear,
    pub se_up: Linear,
    pub scale: usize,
}

impl SeRes2Block {
    fn new(pb: &mut ParamBuilder<'_>, cfg: &EcapaConfig, dilation: usize) -> Self {
        let c = cfg.channels;
        let w = c / cfg.res2_scale;
        let res2 = (1..cfg.res2_scale)
            .map(|i| {
                (
                    Conv1d::new(
                        pb,
                        &format!("res2_{i}"),
                        w,
                        w,
                        cfg.res2_kernel,
                        1,
                        dilation,
                        true,
                    ),
                    BatchNorm::new(pb, &format!("res2_bn{i}"), w),
                )
            })
            .collect();
        SeRes2Block {
            conv_in: Conv1d::new(pb, "conv_in", c, c, 1, 1, 1, true),
            bn_in: BatchNorm::new(pb, "bn_in", c),
            res2,
            conv_out: Conv1d::new(pb, "conv_out", c, c, 1, 1, 1, true),
            bn_out: BatchNorm::new(pb, "bn_out", c),
            se_down: Linear::new(pb, "se_down", c, cfg.se_bottleneck, true),
            se_up: Linear::new(pb, "se_up", cfg.se_bottleneck, c, true),
            scale: cfg.res2_scale,
        }
    }

    /// Output of the block before the squeeze-excitation gate and residual.
    pub fn res2_forward<'a>(&self, tape: &mut Tape<'a>, ctx: &Ctx<'a>, x: Var) -> Var {
        let h = self.conv_in.forward(tape, ctx, x);
        let h = tape.relu(h);
        let h = self.bn_in.forward(tape, ctx, h);
        let w = tape.value(h).cols() / self.scale;
        let mut parts = Vec::with_capacity(self.scale);
        parts.push(tape.slice_cols(h, 0, w));
        let mut prev: Option<Var> = None;
        for (i, (conv, bn)) in self.res2.iter().enumerate() {
            let split = tape.slice_cols(h, (i + 1) * w, w);
            let input = match prev {
                Some(p) => tape.add(split, p),
                None => split,
            };
            let y = conv.forward(tape, ctx, input);
            let y = tape.relu(y);
            let y = bn.forward(tape, ctx, y);
            parts.push(y);
            prev = Some(y);
        }
        let h = tape.concat_cols(&parts);
        let h = self.conv_out.forward(tape, ctx, h);
        let h = tape.relu(h);
        self.bn_out.forward(tape, ctx, h)
    }

    pub fn forward<'a>(&self, tape: &mut Tape<'a>, ctx: &Ctx<'a>, x: Var) -> Var {
        let h = self.res2_forward(tape, ctx, x);
        let gated = if ctx.probe.se_gate_ones {
            h
        } else {
            let s = tape.mean_rows(h);
            let s = self.se_down.forward(tape, ctx, s);
            let s = tape.relu(s);
            let s = self.se_up.forward(tape, ctx, s);
            let s = tape.sigmoid(s);
            tape.mul_row(h, s)
        };
        tape.add(x, gated)
    }

    fn cost(&self, t: usize, report: &mut CostReport) {
        self.conv_in.cost(t, report);
        self.bn_in.cost(report);
        for (conv, bn) in &self.res2 {
            conv.cost(t, report);
            bn.cost(report);
        }
        self.conv_out.cost(t, report);
        self.bn_out.cost(report);
        self.se_down.cost(1, report);
        self.se_up.cost(1, report);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EcapaTdnn {
    pub stem: Conv1d,
    pub stem_bn: BatchNorm,
    pub blocks: Vec<SeRes2Block>,
    pub mfa: Conv1d,
}

impl EcapaTdnn {
    pub fn new(cfg: &EcapaConfig, pb: &mut ParamBuilder<'_>) -> Result<Self> {
        cfg.validate()?;
        pb.set_prefix("encoder");
        let c = cfg.channels;
        let stem = Conv1d::new(
            pb,
            "stem",
            cfg.input_dim,
            c,
            cfg.stem_kernel,
            cfg.stem_stride,
            1,
            true,
        );
        let stem_bn = BatchNorm::new(pb, "stem_bn", c);
        let blocks = cfg
            .dilations
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                pb.set_prefix(&format!("encoder.block{i}"));
                SeRes2Block::new(pb, cfg, d)
            })
            .collect();
        pb.set_prefix("encoder");
        let mfa = Conv1d::new(
            pb,
            "mfa",
            c * cfg.dilations.len(),
            cfg.mfa_channels,
            1,
            1,
            1,
            true,
        );
        Ok(EcapaTdnn {
            stem,
            stem_bn,
            blocks,
            mfa,
        })
    }

    pub fn forward<'a>(&self, tape: &mut Tape<'a>, ctx: &Ctx<'a>, x: Var) -> Var {
        let h = self.stem.forward(tape, ctx, x);
        let h = tape.relu(h);
        let mut h = self.stem_bn.forward(tape, ctx, h);
        let mut outs = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            h = b.forward(tape, ctx, h);
            outs.push(h);
        }
        let cat = tape.concat_cols(&outs);
        let y = self.mfa.forward(tape, ctx, cat);
        tape.relu(y)
    }

    pub fn out_dim(&self) -> usize {
        self.mfa.cout
    }

    pub fn out_frames(&self, t_in: usize) -> usize {
        self.stem.out_frames(t_in)
    }

    pub fn cost(&self, t_in: usize, report: &mut CostReport) {
        self.stem.cost(t_in, report);
        self.stem_bn.cost(report);
        let t = self.stem.out_frames(t_in);
        for b in &self.blocks {
            b.cost(t, report);
        }
        self.mfa.cost(t, report);
    }
}
