//! Aggregators from a frame sequence to one fixed-length utterance embedding.

mod asp;
mod gap;

pub use asp::{Asp, AspConfig, VARIANCE_FLOOR};
pub use gap::{
    retained_nodes, top_k_indices, Gap, GapConfig, GapNodeCounts, GraphAttention, GraphPool,
};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::Ctx;
use crate::params::ParamBuilder;
use crate::profiling::CostReport;
use crate::tape::{Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PoolingConfig {
    Asp(AspConfig),
    Gap(GapConfig),
}

impl PoolingConfig {
    pub fn name(&self) -> &'static str {
        match self {
            PoolingConfig::Asp(_) => "asp",
            PoolingConfig::Gap(_) => "gap",
        }
    }

    pub fn scaled(&self, scale: f64) -> Self {
        match self {
            PoolingConfig::Asp(c) => PoolingConfig::Asp(c.scaled(scale)),
            PoolingConfig::Gap(c) => PoolingConfig::Gap(c.scaled(scale)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            PoolingConfig::Asp(c) => c.validate(),
            PoolingConfig::Gap(c) => c.validate(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Pooler {
    Asp(Asp),
    Gap(Gap),
}

impl Pooler {
    pub fn new(
        cfg: &PoolingConfig,
        pb: &mut ParamBuilder<'_>,
        dim: usize,
        embedding_dim: usize,
    ) -> Result<Self> {
        Ok(match cfg {
            PoolingConfig::Asp(c) => Pooler::Asp(Asp::new(c, pb, dim, embedding_dim)?),
            PoolingConfig::Gap(c) => Pooler::Gap(Gap::new(c, pb, dim, embedding_dim)?),
        })
    }

    pub fn forward<'a>(&self, tape: &mut Tape<'a>, ctx: &Ctx<'a>, frames: Var) -> Var {
        match self {
            Pooler::Asp(p) => p.forward(tape, ctx, frames),
            Pooler::Gap(p) => p.forward(tape, ctx, frames),
        }
    }

    pub fn cost(&self, frames: usize, report: &mut CostReport) {
        match self {
            Pooler::Asp(p) => p.cost(frames, report),
            Pooler::Gap(p) => p.cost(frames, report),
        }
    }
}
