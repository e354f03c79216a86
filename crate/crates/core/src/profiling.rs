//! Analytic parameter and FLOP accounting.
//!
//! FLOPs are counted as two per multiply-accumulate for convolutions, linear
//! layers and attention products, plus three per softmax element. Element-wise
//! activations and normalisation arithmetic are not counted. Classifier heads
//! are never included.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub name: String,
    pub params: usize,
    pub flops: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub entries: Vec<LayerCost>,
}

impl CostReport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, params: usize, flops: u64) {
        self.entries.push(LayerCost {
            name: name.into(),
            params,
            flops,
        });
    }

    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|e| e.params).sum()
    }

    pub fn flops(&self) -> u64 {
        self.entries.iter().map(|e| e.flops).sum()
    }

    /// Sum over entries whose name starts with `prefix`.
    pub fn flops_matching(&self, prefix: &str) -> u64 {
        self.entries
            .iter()
            .filter(|e| e.name.starts_with(prefix))
            .map(|e| e.flops)
            .sum()
    }

    pub fn extend(&mut self, other: CostReport) {
        self.entries.extend(other.entries);
    }
}

/// Target size of a full-size model and the accepted relative deviation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReferenceCost {
    pub model: &'static str,
    pub params: f64,
    pub flops: f64,
}

pub const PARAM_TOLERANCE: f64 = 0.10;
pub const FLOP_TOLERANCE: f64 = 0.15;

/// Reference sizes of the three full-size encoders on a two-second input.
pub const REFERENCE_COSTS: [ReferenceCost; 3] = [
    ReferenceCost {
        model: "ecapa_tdnn",
        params: 540e3,
        flops: 39.1e6,
    },
    ReferenceCost {
        model: "conformer",
        params: 1.4e6,
        flops: 642.2e6,
    },
    ReferenceCost {
        model: "liconet",
        params: 694e3,
        flops: 46.5e6,
    },
];

pub fn reference_cost(model: &str) -> Option<&'static ReferenceCost> {
    REFERENCE_COSTS.iter().find(|r| r.model == model)
}

/// Signed relative deviation `(got − want) / want`.
pub fn relative_deviation(got: f64, want: f64) -> f64 {
    (got - want) / want
}

/// Two FLOPs per MAC.
pub fn matmul_flops(rows: usize, inner: usize, cols: usize) -> u64 {
    2 * rows as u64 * inner as u64 * cols as u64
}

pub fn conv1d_flops(cin: usize, cout: usize, kernel: usize, t_out: usize) -> u64 {
    2 * cin as u64 * cout as u64 * kernel as u64 * t_out as u64
}

pub fn softmax_flops(elements: usize) -> u64 {
    3 * elements as u64
}
