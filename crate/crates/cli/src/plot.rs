//! Static SVG curves of one metric across event-count conditions.

use std::path::Path;

use evmotion::evaluation::EvaluationReport;
use plotters::prelude::*;

const PALETTE: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
];

/// One line per report; x is the condition in display order.
pub fn metric_vs_condition(
    reports: &[(String, EvaluationReport)],
    metric: &str,
    title: &str,
    path: &Path,
) -> Result<(), Box<dyn std::error::Error>> {
    let conditions = reports.first().map(|(_, r)| r.condition_order()).unwrap_or_default();
    let series: Vec<(&str, Vec<(usize, f64, f64)>)> = reports
        .iter()
        .map(|(label, r)| {
            let pts = conditions
                .iter()
                .enumerate()
                .filter_map(|(i, c)| r.metric(c, metric).filter(|m| m.value.is_finite()).map(|m| (i, m.value, m.ci95)))
                .collect();
            (label.as_str(), pts)
        })
        .collect();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (_, pts) in &series {
        for &(_, v, ci) in pts {
            lo = lo.min(v - ci);
            hi = hi.max(v + ci);
        }
    }
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.1).max(1e-3);
    let root = SVGBackend::new(path, (720, 440)).into_drawing_area();
    root.fill(&WHITE)?;
    let n = conditions.len().max(1);
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("{title} by condition"), ("sans-serif", 20))
        .margin(16)
        .x_label_area_size(36)
        .y_label_area_size(56)
        .build_cartesian_2d(-0.5f64..(n as f64 - 0.5), (lo - pad)..(hi + pad))?;
    let labels = conditions.clone();
    chart
        .configure_mesh()
        .x_labels(n)
        .x_label_formatter(&|x| {
            let i = x.round();
            if (x - i).abs() < 1e-6 && i >= 0.0 {
                labels.get(i as usize).cloned().unwrap_or_default()
            } else {
                String::new()
            }
        })
        .x_desc("condition")
        .y_desc(title)
        .draw()?;
    for (k, (label, pts)) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        chart
            .draw_series(LineSeries::new(pts.iter().map(|&(i, v, _)| (i as f64, v)), color.stroke_width(2)))?
            .label(*label)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
        chart.draw_series(pts.iter().map(|&(i, v, _)| Circle::new((i as f64, v), 3, color.filled())))?;
        chart.draw_series(
            pts.iter().map(|&(i, v, ci)| PathElement::new(vec![(i as f64, v - ci), (i as f64, v + ci)], color.stroke_width(1))),
        )?;
    }
    chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw()?;
    root.present()?;
    Ok(())
}
