//! Parameterised building blocks shared by the encoders and poolers.

use alloc::format;

use serde::{Deserialize, Serialize};

use crate::params::{ParamBuilder, ParamId, ParamStore};
use crate::profiling::{conv1d_flops, matmul_flops, CostReport};
use crate::tape::{output_frames, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Mode {
    #[default]
    Train,
    Eval,
}

/// Statistics batch normalisation uses in [`Mode::Eval`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EvalNorm {
    /// The utterance's own frame statistics, exactly as in training.
    #[default]
    Utterance,
    /// The running averages accumulated during training.
    Running,
}

/// Everything a forward pass needs besides the input.
#[derive(Clone, Copy)]
pub struct Ctx<'a> {
    pub store: &'a ParamStore,
    pub mode: Mode,
    pub probe: Probe,
    pub eval_norm: EvalNorm,
}

impl<'a> Ctx<'a> {
    pub fn new(store: &'a ParamStore, mode: Mode) -> Self {
        Ctx {
            store,
            mode,
            probe: Probe::default(),
            eval_norm: EvalNorm::Running,
        }
    }

    pub fn with_eval_norm(mut self, eval_norm: EvalNorm) -> Self {
        self.eval_norm = eval_norm;
        self
    }

    pub fn with_probe(mut self, probe: Probe) -> Self {
        self.probe = probe;
        self
    }
}

/// Test-time overrides that replace learned gates by fixed values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Probe {
    /// Squeeze-excitation gates fixed to one.
    pub se_gate_ones: bool,
    /// Pooling and graph attention weights fixed to uniform.
    pub uniform_attention: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub name: alloc::string::String,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Self {
        let weight = pb.uniform(&format!("{name}.weight"), d_in, d_out, d_in);
        let bias = bias.then(|| pb.uniform(&format!("{name}.bias"), 1, d_out, d_in));
        Linear {
            name: full(pb, name),
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    pub fn forward<'a>(&self, tape: &mut Tape<'a>, ctx: &Ctx<'a>, x: Var) -> Var {
        let w = tape.param(ctx.store, self.weight);
        let y = tape.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = tape.param(ctx.store, b);
                tape.add_row(y, b)
            }
            None => y,
        }
    }

    pub fn param_count(&self) -> usize {
        self.d_in * self.d_out + if self.bias.is_some() { self.d_out } else { 0 }
    }

    pub fn cost(&self, rows: usize, report: &mut CostReport) {
        report.push(
            self.name.clone(),
            self.param_count(),
            matmul_flops(rows, self.d_in, self.d_out),
        );
    }
}

fn full(pb: &ParamBuilder<'_>, name: &str) -> alloc::string::String {
    if pb.prefix().is_empty() {
        name.into()
    } else {
        format!("{}.{name}", pb.prefix())
    }
}

/// Dense 1-D convolution with "same" padding, weight laid out `(k·C_in) × C_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv1d {
    pub name: alloc::string::String,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
        bias: bool,
    ) -> Self {
        let fan_in = cin * kernel;
        let weight = pb.uniform(&format!("{name}.weight"), kernel * cin, cout, fan_in);
        let bias = bias.then(|| pb.uniform(&format!("{name}.bias"), 1, cout, fan_in));
        Conv1d {
            name: full(pb, name),
            weight,
            bias,
            cin,
            cout,
            kernel,
            stride,
            dilation,
        }
    }

    pub fn forward<'a>(&self, tape: &mut Tape<'a>, ctx: &Ctx<'a>, x: Var) -> Var {
        let cols = if self.kernel == 1 && self.stride == 1 {
            x
        } else {
            tape.im2col(x, self.kernel, self.stride, self.dilation)
        };
        let w = tape.param(ctx.store, self.weight);
        let y = tape.matmul(cols, w);
        match self.bias {
            Some(b) => {
                let b = tape.param(ctx.store, b);
                tape.add_row(y, b)
            }
            None => y,
        }
    }

    pub fn out_frames(&self, t_in: usize) -> usize {
        output_frames(t_in, self.stride)
    }

    pub fn param_count(&self) -> usize {
        self.kernel * self.cin * self.cout + if self.bias.is_some() { self.cout } else { 0 }
    }

    pub fn cost(&self, t_in: usize, report: &mut CostReport) {
        let flops = conv1d_flops(self.cin, self.cout, self.kernel, self.out_frames(t_in));
        report.push(self.name.clone(), self.param_count(), flops);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DepthwiseConv1d {
    pub name: alloc::string::String,
    pub weight: ParamId,
    pub bias: ParamId,
    pub channels: usize,
    pub kernel: usize,
}

impl DepthwiseConv1d {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, channels: usize, kernel: usize) -> Self {
        let weight = pb.uniform(&format!("{name}.weight"), kernel, channels, kernel);
        let bias = pb.uniform(&format!("{name}.bias"), 1, channels, kernel);
        DepthwiseConv1d {
            name: full(pb, name),
            weight,
            bias,
            channels,
            kernel,
        }
    }

    pub fn forward<'a>(&self, tape: &mut Tape<'a>, ctx: &Ctx<'a>, x: Var) -> Var {
        let w = tape.param(ctx.store, self.weight);
        let b = tape.param(ctx.store, self.bias);
        let y = tape.depthwise_conv(x, w);
        tape.add_row(y, b)
    }

    pub fn param_count(&self) -> usize {
        self.kernel * self.channels + self.channels
    }

    pub fn cost(&self, t_in: usize, report: &mut CostReport) {
        report.push(
            self.name.clone(),
            self.param_count(),
            2 * (self.kernel * self.channels * t_in) as u64,
        );
    }
}

/// Batch normalisation over the frames of one utterance. In [`Mode::Eval`]
/// the context's [`EvalNorm`] picks utterance or running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub name: alloc::string::String,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
}

pub const NORM_EPS: f64 = 1e-5;

impl BatchNorm {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, channels: usize) -> Self {
        let gamma = pb.constant(&format!("{name}.gamma"), Tensor::full(1, channels, 1.0));
        let beta = pb.constant(&format!("{name}.beta"), Tensor::zeros(1, channels));
        let running_mean = pb.buffer(&format!("{name}.running_mean"), Tensor::zeros(1, channels));
        let running_var = pb.buffer(
            &format!("{name}.running_var"),
            Tensor::full(1, channels, 1.0),
        );
        BatchNorm {
            name: full(pb, name),
            gamma,
            beta,
            running_mean,
            running_var,
            channels,
        }
    }

    pub fn forward<'a>(&self, tape: &mut Tape<'a>, ctx: &Ctx<'a>, x: Var) -> Var {
        let g = tape.param(ctx.store, self.gamma);
        let b = tape.param(ctx.store, self.beta);
        let running = match (ctx.mode, ctx.eval_norm) {
            (Mode::Eval, EvalNorm::Running) => Some((
                ctx.store.get(self.running_mean),
                ctx.store.get(self.running_var),
            )),
            _ => None,
        };
        tape.batch_norm(
            x,
            g,
            b,
            NORM_EPS,
            (self.running_mean, self.running_var),
            running,
        )
    }

    pub fn cost(&self, report: &mut CostReport) {
        report.push(self.name.clone(), 2 * self.channels, 0);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub name: alloc::string::String,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub channels: usize,
}

impl LayerNorm {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, channels: usize) -> Self {
        let gamma = pb.constant(&format!("{name}.gamma"), Tensor::full(1, channels, 1.0));
        let beta = pb.constant(&format!("{name}.beta"), Tensor::zeros(1, channels));
        LayerNorm {
            name: full(pb, name),
            gamma,
            beta,
            channels,
        }
    }

    pub fn forward<'a>(&self, tape: &mut Tape<'a>, ctx: &Ctx<'a>, x: Var) -> Var {
        let g = tape.param(ctx.store, self.gamma);
        let b = tape.param(ctx.store, self.beta);
        tape.layer_norm(x, g, b, NORM_EPS)
    }

    pub fn cost(&self, report: &mut CostReport) {
        report.push(self.name.clone(), 2 * self.channels, 0);
    }
}
