//! Static SVG figures: training curves and per-step action traces.

use std::path::Path;

use handgf_core::rl::CurvePoint;
use plotters::prelude::*;

use crate::error::{CliError, Result};

fn plot_err<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Io(std::io::Error::other(e.to_string()))
}

const COLORS: [RGBColor; 6] = [BLUE, RED, GREEN, MAGENTA, CYAN, BLACK];

/// Success rate against environment steps, one line per named curve.
pub fn training_curves(path: &Path, curves: &[(String, Vec<CurvePoint>)]) -> Result<()> {
    let max_x = curves
        .iter()
        .flat_map(|(_, c)| c.iter().map(|p| p.env_steps))
        .max()
        .unwrap_or(1)
        .max(1) as f64;
    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("training success rate", ("sans-serif", 20))
        .margin(10)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(0.0..max_x, 0.0..1.0)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("environment steps")
        .y_desc("success")
        .draw()
        .map_err(plot_err)?;
    for (i, (name, c)) in curves.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        chart
            .draw_series(LineSeries::new(
                c.iter().map(|p| (p.env_steps as f64, p.success_rate)),
                color,
            ))
            .map_err(plot_err)?
            .label(name.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

/// Mean alignment `<a^p/|a^p|, dJ>` and mean `|a^p|` per step.
pub fn action_trace(path: &Path, trace: &[(usize, f64, f64)]) -> Result<()> {
    let max_t = trace.iter().map(|r| r.0).max().unwrap_or(1) as f64;
    let lo = trace.iter().map(|r| r.1.min(r.2)).fold(0.0, f64::min);
    let hi = trace
        .iter()
        .map(|r| r.1.max(r.2))
        .fold(0.0, f64::max)
        .max(lo + 1e-6);
    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("primitive action along the episode", ("sans-serif", 20))
        .margin(10)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(0.0..max_t, lo..hi * 1.05)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("step")
        .draw()
        .map_err(plot_err)?;
    chart
        .draw_series(LineSeries::new(
            trace.iter().map(|r| (r.0 as f64, r.1)),
            BLUE,
        ))
        .map_err(plot_err)?
        .label("<a^p/|a^p|, dJ>")
        .legend(|(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], BLUE));
    chart
        .draw_series(LineSeries::new(
            trace.iter().map(|r| (r.0 as f64, r.2)),
            RED,
        ))
        .map_err(plot_err)?
        .label("|a^p|")
        .legend(|(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], RED));
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}
