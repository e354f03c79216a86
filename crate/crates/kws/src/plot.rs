//! Overlaid DET curves as an SVG figure.

use std::path::Path;

use plotters::prelude::*;

use crate::error::{AppError, AppResult};
use crate::evaluate::DetTable;

const PALETTE: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(214, 39, 40),
    RGBColor(44, 160, 44),
    RGBColor(255, 127, 14),
    RGBColor(148, 103, 189),
    RGBColor(23, 190, 207),
];

/// Legend text of a table: its label, counting mode and FRR at the target.
pub fn legend_label(t: &DetTable) -> String {
    match t.frr_at_target {
        Some(f) => format!(
            "{} ({}, FRR {:.2}% @ {} FA/hr)",
            t.label,
            t.counting,
            100.0 * f,
            t.target_fa_per_hour
        ),
        None => format!("{} ({})", t.label, t.counting),
    }
}

/// FRR (%) against FA/hr, one line per table. The x axis ends at `max_fa`
/// or, when `None`, at the largest rate on any curve.
pub fn plot_det(tables: &[DetTable], out: &Path, max_fa: Option<f64>) -> AppResult<()> {
    if tables.is_empty() {
        return Err(AppError::Data("plot-det needs at least one table".into()));
    }
    let x_max = max_fa
        .unwrap_or_else(|| {
            tables
                .iter()
                .flat_map(|t| t.points.iter().map(|p| p.fa_per_hour))
                .fold(0.0, f64::max)
        })
        .max(1e-3);
    let err = |e: &dyn std::fmt::Display| AppError::Io(format!("{}: {e}", out.display()));
    let root = SVGBackend::new(out, (800, 600)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| err(&e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption("DET curves", ("sans-serif", 24))
        .margin(16)
        .x_label_area_size(48)
        .y_label_area_size(56)
        .build_cartesian_2d(0.0..x_max, 0.0..100.0)
        .map_err(|e| err(&e))?;
    chart
        .configure_mesh()
        .x_desc("False accepts per hour")
        .y_desc("False reject rate (%)")
        .draw()
        .map_err(|e| err(&e))?;
    for (i, t) in tables.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<(f64, f64)> = t
            .points
            .iter()
            .filter(|p| p.fa_per_hour <= x_max)
            .map(|p| (p.fa_per_hour, 100.0 * p.frr))
            .collect();
        chart
            .draw_series(LineSeries::new(pts, color.stroke_width(2)))
            .map_err(|e| err(&e))?
            .label(legend_label(t))
            .legend(move |(x, y)| {
                PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2))
            });
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .position(SeriesLabelPosition::UpperRight)
        .draw()
        .map_err(|e| err(&e))?;
    root.present().map_err(|e| err(&e))?;
    Ok(())
}
