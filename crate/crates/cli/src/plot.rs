use std::path::Path;

use anyhow::{anyhow, Result};
use plotters::prelude::*;

use retarget_core::trainer::LogRow;

const PANELS: [(&str, fn(&LogRow) -> f64); 3] = [
    ("mean reward", |r| r.mean_reward),
    ("upper loss", |r| r.upper_loss),
    ("update rate", |r| r.update_rate),
];

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-9);
    (lo - pad, hi + pad)
}

/// Three stacked line plots over the iteration axis, written as SVG.
pub fn training_curves(rows: &[LogRow], out: &Path) -> Result<()> {
    let root = SVGBackend::new(out, (900, 900)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| anyhow!("{e}"))?;
    let last = rows.iter().map(|r| r.iteration).max().unwrap_or(0).max(1);
    for (area, (name, value)) in root.split_evenly((3, 1)).iter().zip(PANELS) {
        let (lo, hi) = range(rows.iter().map(value));
        let mut chart = ChartBuilder::on(area)
            .caption(name, ("sans-serif", 18))
            .margin(10)
            .x_label_area_size(30)
            .y_label_area_size(70)
            .build_cartesian_2d(0usize..last, lo..hi)
            .map_err(|e| anyhow!("{e}"))?;
        chart.configure_mesh().x_desc("iteration").draw().map_err(|e| anyhow!("{e}"))?;
        chart
            .draw_series(LineSeries::new(rows.iter().map(|r| (r.iteration, value(r))), &BLUE))
            .map_err(|e| anyhow!("{e}"))?;
    }
    root.present().map_err(|e| anyhow!("{e}"))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn writes_an_svg_with_three_panels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.svg");
        let rows: Vec<LogRow> = (0..20)
            .map(|i| LogRow {
                iteration: i,
                mean_reward: i as f64,
                upper_loss: 1.0 / (1.0 + i as f64),
                update_rate: 0.0,
                ..LogRow::default()
            })
            .collect();
        training_curves(&rows, &path).unwrap();
        let svg = std::fs::read_to_string(&path).unwrap();
        assert!(svg.starts_with("<svg"));
        assert_eq!(svg.matches(r##"stroke="#0000FF""##).count(), 3, "{svg}");
    }
}
