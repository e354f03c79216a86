//! Parameter and FLOP table for configured models.

use qbye_core::encoders::EncoderFamily;
use qbye_core::losses::{HeadDims, HybridLossConfig};
use qbye_core::model::{KwsModel, ModelConfig, SEGMENT_FRAMES};
use qbye_core::profiling::{
    reference_cost, relative_deviation, CostReport, FLOP_TOLERANCE, PARAM_TOLERANCE,
};

use crate::error::AppResult;

/// Head sizes only shape the classifier heads, which are not counted.
const PROFILE_DIMS: HeadDims = HeadDims {
    words: 1002,
    speakers: 1,
    phonemes: 1,
};

#[derive(Clone, Debug, PartialEq)]
pub struct ProfileRow {
    pub name: String,
    pub pooling: String,
    pub params: usize,
    pub flops: u64,
    /// Reference `(params, flops)` for the full-size family, when known.
    pub reference: Option<(f64, f64)>,
}

impl ProfileRow {
    pub fn deviations(&self) -> Option<(f64, f64)> {
        self.reference.map(|(p, f)| {
            (
                relative_deviation(self.params as f64, p),
                relative_deviation(self.flops as f64, f),
            )
        })
    }

    pub fn within_tolerance(&self) -> Option<bool> {
        self.deviations()
            .map(|(p, f)| p.abs() <= PARAM_TOLERANCE && f.abs() <= FLOP_TOLERANCE)
    }
}

pub fn profile_model(
    name: &str,
    cfg: &ModelConfig,
    with_reference: bool,
) -> AppResult<(ProfileRow, CostReport)> {
    let model = KwsModel::new(cfg, &HybridLossConfig::default(), PROFILE_DIMS, 0)?;
    let report = model.cost_report(SEGMENT_FRAMES);
    let reference = if with_reference {
        reference_cost(cfg.encoder.family().name()).map(|r| (r.params, r.flops))
    } else {
        None
    };
    let row = ProfileRow {
        name: name.into(),
        pooling: cfg.pooling.name().into(),
        params: model.count_params(),
        flops: report.flops(),
        reference,
    };
    Ok((row, report))
}

/// The three shipped full-size configurations.
pub fn reference_rows() -> AppResult<Vec<ProfileRow>> {
    [
        EncoderFamily::EcapaTdnn,
        EncoderFamily::Conformer,
        EncoderFamily::Liconet,
    ]
    .into_iter()
    .map(|f| Ok(profile_model(f.name(), &ModelConfig::reference(f), true)?.0))
    .collect()
}

fn si(v: f64) -> String {
    if v >= 1e6 {
        format!("{:.2}M", v / 1e6)
    } else {
        format!("{:.1}K", v / 1e3)
    }
}

pub fn format_table(rows: &[ProfileRow]) -> String {
    let mut out = format!(
        "{:<16} {:<6} {:>10} {:>10} {:>10} {:>10} {:>8} {:>8} {:>5}\n",
        "model", "pool", "params", "ref", "FLOPs", "ref", "dParam", "dFLOP", "ok"
    );
    for r in rows {
        let (rp, rf) = r
            .reference
            .map_or(("-".into(), "-".into()), |(p, f)| (si(p), si(f)));
        let (dp, df) = r.deviations().map_or(("-".into(), "-".into()), |(p, f)| {
            (format!("{:+.1}%", 100.0 * p), format!("{:+.1}%", 100.0 * f))
        });
        let ok = r
            .within_tolerance()
            .map_or("-", |b| if b { "yes" } else { "no" });
        out.push_str(&format!(
            "{:<16} {:<6} {:>10} {:>10} {:>10} {:>10} {:>8} {:>8} {:>5}\n",
            r.name,
            r.pooling,
            si(r.params as f64),
            rp,
            si(r.flops as f64),
            rf,
            dp,
            df,
            ok
        ));
    }
    out.push_str(&format!(
        "Counts cover encoder + pooling + projection on a {SEGMENT_FRAMES}-frame (2 s) input; classifier heads excluded. \
         FLOPs are 2 x MACs. Tolerance {:.0}% params, {:.0}% FLOPs.\n",
        100.0 * PARAM_TOLERANCE,
        100.0 * FLOP_TOLERANCE
    ));
    out
}

pub fn format_breakdown(report: &CostReport) -> String {
    let mut out = format!("{:<48} {:>10} {:>14}\n", "layer", "params", "FLOPs");
    for e in &report.entries {
        out.push_str(&format!(
            "{:<48} {:>10} {:>14}\n",
            e.name, e.params, e.flops
        ));
    }
    out.push_str(&format!(
        "{:<48} {:>10} {:>14}\n",
        "total",
        report.param_count(),
        report.flops()
    ));
    out
}
