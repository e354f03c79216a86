//! Frame-level encoders mapping `T × 40` log-Mel features to `T' × D` frames.

mod conformer;
mod ecapa;
mod liconet;

pub use conformer::{
    Conformer, ConformerBlock, ConformerConfig, ConformerStage, ConvModule, FeedForward,
    SelfAttention,
};
pub use ecapa::{EcapaConfig, EcapaTdnn, SeRes2Block};
pub use liconet::{LicoBlock, LicoBlockSpec, Liconet, LiconetConfig};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::Ctx;
use crate::params::ParamBuilder;
use crate::profiling::CostReport;
use crate::tape::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderFamily {
    Liconet,
    Conformer,
    EcapaTdnn,
}

impl EncoderFamily {
    pub fn name(self) -> &'static str {
        match self {
            EncoderFamily::Liconet => "liconet",
            EncoderFamily::Conformer => "conformer",
            EncoderFamily::EcapaTdnn => "ecapa_tdnn",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum EncoderConfig {
    Liconet(LiconetConfig),
    Conformer(ConformerConfig),
    EcapaTdnn(EcapaConfig),
}

impl EncoderConfig {
    pub fn reference(family: EncoderFamily) -> Self {
        match family {
            EncoderFamily::Liconet => EncoderConfig::Liconet(LiconetConfig::reference()),
            EncoderFamily::Conformer => EncoderConfig::Conformer(ConformerConfig::reference()),
            EncoderFamily::EcapaTdnn => EncoderConfig::EcapaTdnn(EcapaConfig::reference()),
        }
    }

    pub fn family(&self) -> EncoderFamily {
        match self {
            EncoderConfig::Liconet(_) => EncoderFamily::Liconet,
            EncoderConfig::Conformer(_) => EncoderFamily::Conformer,
            EncoderConfig::EcapaTdnn(_) => EncoderFamily::EcapaTdnn,
        }
    }

    pub fn scaled(&self, scale: f64) -> Self {
        match self {
            EncoderConfig::Liconet(c) => EncoderConfig::Liconet(c.scaled(scale)),
            EncoderConfig::Conformer(c) => EncoderConfig::Conformer(c.scaled(scale)),
            EncoderConfig::EcapaTdnn(c) => EncoderConfig::EcapaTdnn(c.scaled(scale)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            EncoderConfig::Liconet(c) => c.validate(),
            EncoderConfig::Conformer(c) => c.validate(),
            EncoderConfig::EcapaTdnn(c) => c.validate(),
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            EncoderConfig::Liconet(c) => c.input_dim,
            EncoderConfig::Conformer(c) => c.input_dim,
            EncoderConfig::EcapaTdnn(c) => c.input_dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Encoder {
    Liconet(Liconet),
    Conformer(Conformer),
    EcapaTdnn(EcapaTdnn),
}

impl Encoder {
    pub fn new(cfg: &EncoderConfig, pb: &mut ParamBuilder<'_>) -> Result<Self> {
        Ok(match cfg {
            EncoderConfig::Liconet(c) => Encoder::Liconet(Liconet::new(c, pb)?),
            EncoderConfig::Conformer(c) => Encoder::Conformer(Conformer::new(c, pb)?),
            EncoderConfig::EcapaTdnn(c) => Encoder::EcapaTdnn(EcapaTdnn::new(c, pb)?),
        })
    }

    pub fn forward<'a>(&self, tape: &mut Tape<'a>, ctx: &Ctx<'a>, features: Var) -> Var {
        match self {
            Encoder::Liconet(e) => e.forward(tape, ctx, features),
            Encoder::Conformer(e) => e.forward(tape, ctx, features),
            Encoder::EcapaTdnn(e) => e.forward(tape, ctx, features),
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            Encoder::Liconet(e) => e.out_dim(),
            Encoder::Conformer(e) => e.out_dim(),
            Encoder::EcapaTdnn(e) => e.out_dim(),
        }
    }

    pub fn out_frames(&self, t_in: usize) -> usize {
        match self {
            Encoder::Liconet(e) => e.out_frames(t_in),
            Encoder::Conformer(_) => t_in,
            Encoder::EcapaTdnn(e) => e.out_frames(t_in),
        }
    }

    /// Input frames per output frame; output frame `j` is centred on input frame `j·stride`.
    pub fn frame_stride(&self) -> usize {
        match self {
            Encoder::Liconet(e) => e.blocks.iter().map(|b| b.temporal.stride).product(),
            Encoder::Conformer(_) => 1,
            Encoder::EcapaTdnn(e) => e.stem.stride,
        }
    }

    pub fn cost(&self, t_in: usize, report: &mut CostReport) {
        match self {
            Encoder::Liconet(e) => e.cost(t_in, report),
            Encoder::Conformer(e) => e.cost(t_in, report),
            Encoder::EcapaTdnn(e) => e.cost(t_in, report),
        }
    }
}
