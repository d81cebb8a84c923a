//! Static SVG charts.

use std::path::Path;

use plotters::prelude::*;

use super::{EvalResult, RobustnessTable};
use crate::error::{Error, Result};

fn plot_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::format(path, format!("plot: {e}"))
}

/// Mean F1 against JPEG quality, with the uncompressed score as a dashed line.
pub fn plot_robustness(path: &Path, table: &RobustnessTable) -> Result<()> {
    let root = SVGBackend::new(path, (640, 400)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(path, e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("F1 vs JPEG quality ({})", table.dataset), ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(48)
        .build_cartesian_2d(0u32..100u32, 0f64..1.05f64)
        .map_err(|e| plot_err(path, e))?;
    chart
        .configure_mesh()
        .x_desc("JPEG quality")
        .y_desc("mean F1")
        .draw()
        .map_err(|e| plot_err(path, e))?;
    let mut pts: Vec<(u32, f64)> = table.rows.iter().map(|r| (r.quality as u32, r.mean_f1)).collect();
    pts.sort_by_key(|p| p.0);
    chart
        .draw_series(LineSeries::new(pts.clone(), BLUE.stroke_width(2)))
        .map_err(|e| plot_err(path, e))?;
    chart
        .draw_series(pts.iter().map(|&p| Circle::new(p, 4, BLUE.filled())))
        .map_err(|e| plot_err(path, e))?;
    chart
        .draw_series(DashedLineSeries::new(
            [(0u32, table.baseline_f1), (100u32, table.baseline_f1)],
            6,
            4,
            RED.stroke_width(1),
        ))
        .map_err(|e| plot_err(path, e))?;
    root.present().map_err(|e| plot_err(path, e))
}

/// One bar per image, in id order.
pub fn plot_per_image(path: &Path, result: &EvalResult) -> Result<()> {
    let n = result.per_image_f1.len().max(1) as u32;
    let root = SVGBackend::new(path, (720, 400)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(path, e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(
            format!("per-image F1 ({}, mean {:.3})", result.dataset, result.mean_f1),
            ("sans-serif", 20),
        )
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(48)
        .build_cartesian_2d((0u32..n).into_segmented(), 0f64..1.05f64)
        .map_err(|e| plot_err(path, e))?;
    chart
        .configure_mesh()
        .x_desc("image index")
        .y_desc("F1")
        .draw()
        .map_err(|e| plot_err(path, e))?;
    chart
        .draw_series(result.per_image_f1.values().enumerate().map(|(i, &f1)| {
            let i = i as u32;
            Rectangle::new(
                [(SegmentValue::Exact(i), 0.0), (SegmentValue::Exact(i + 1), f1)],
                BLUE.mix(0.6).filled(),
            )
        }))
        .map_err(|e| plot_err(path, e))?;
    root.present().map_err(|e| plot_err(path, e))
}
