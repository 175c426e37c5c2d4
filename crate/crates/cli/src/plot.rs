use std::path::Path;

use anyhow::{anyhow, Result};
use plotters::prelude::*;
use teds_core::eval::EvalReport;

const SIZE: (u32, u32) = (720, 420);
const PALETTE: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
];

fn draw_err<E: std::fmt::Debug>(e: E) -> anyhow::Error {
    anyhow!("plotting failed: {e:?}")
}

/// Mean loss per epoch, one line per named run.
pub fn loss_curves(path: &Path, curves: &[(String, Vec<f64>)]) -> Result<()> {
    let epochs = curves.iter().map(|c| c.1.len()).max().unwrap_or(0).max(1);
    let finite = curves
        .iter()
        .flat_map(|c| c.1.iter().copied())
        .filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (lo, hi) = if lo <= hi {
        (lo.min(0.0), hi * 1.05 + 1e-9)
    } else {
        (0.0, 1.0)
    };

    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(draw_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("training loss", ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(52)
        .build_cartesian_2d(1f64..epochs.max(2) as f64, lo..hi)
        .map_err(draw_err)?;
    chart
        .configure_mesh()
        .x_desc("epoch")
        .y_desc("mean loss")
        .draw()
        .map_err(draw_err)?;
    for (i, (name, values)) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        chart
            .draw_series(LineSeries::new(
                values.iter().enumerate().map(|(e, &v)| ((e + 1) as f64, v)),
                color.stroke_width(2),
            ))
            .map_err(draw_err)?
            .label(name.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(draw_err)?;
    root.present().map_err(draw_err)
}

/// AP against the IoU threshold for spotting and, if present, detection.
pub fn ap_vs_iou(path: &Path, report: &EvalReport) -> Result<()> {
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(draw_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("AP vs IoU threshold", ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(52)
        .build_cartesian_2d(0.5f64..0.95f64, 0f64..1.0f64)
        .map_err(draw_err)?;
    chart
        .configure_mesh()
        .x_desc("IoU threshold")
        .y_desc("AP")
        .draw()
        .map_err(draw_err)?;
    let curves = [("spotting", &report.spotting), ("detection", &report.detection)];
    for (i, (name, curve)) in curves.into_iter().enumerate() {
        let Some(curve) = curve else { continue };
        let color = PALETTE[i];
        let points: Vec<(f64, f64)> = curve.thresholds.iter().copied().zip(curve.ap.iter().copied()).collect();
        chart
            .draw_series(LineSeries::new(points.clone(), color.stroke_width(2)))
            .map_err(draw_err)?
            .label(format!("{name} (mAP {:.3})", curve.map))
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
        chart
            .draw_series(points.into_iter().map(|p| Circle::new(p, 3, color.filled())))
            .map_err(draw_err)?;
    }
    chart
        .configure_series_labels()
        .position(SeriesLabelPosition::LowerLeft)
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(draw_err)?;
    root.present().map_err(draw_err)
}
