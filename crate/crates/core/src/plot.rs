//! Static SVG figures: loss curves, per-scale CKA bars and gate histograms.

use std::path::Path;

use plotters::prelude::*;

use crate::backbone::NUM_LEVELS;
use crate::cdap::GateDiagnostics;
use crate::error::{HrError, Result};
use crate::losses::LossReport;

const SIZE: (u32, u32) = (900, 540);
const PALETTE: [RGBColor; 8] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
    RGBColor(227, 119, 194),
    RGBColor(0, 0, 0),
];

fn draw_err<E: std::fmt::Debug>(e: E) -> HrError {
    HrError::Format(format!("plot backend: {e:?}"))
}

/// Parses a JSON-lines metrics log. Blank lines are skipped; an empty log
/// is an error.
pub fn parse_metrics_log(text: &str) -> Result<Vec<LossReport>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: LossReport =
            serde_json::from_str(line).map_err(|e| HrError::Format(format!("metrics log line {}: {e}", i + 1)))?;
        out.push(r);
    }
    if out.is_empty() {
        return Err(HrError::Format("metrics log is empty".into()));
    }
    Ok(out)
}

fn series(reports: &[LossReport]) -> Vec<(&'static str, Vec<(f64, f64)>)> {
    let cols: [(&str, fn(&LossReport) -> f64); 8] = [
        ("total", |r| r.total),
        ("L_r", |r| r.l_r),
        ("L_n", |r| r.l_n),
        ("L_s", |r| r.l_s),
        ("L_tri", |r| r.l_tri),
        ("L_cs", |r| r.l_cs),
        ("L_ccd", |r| r.l_ccd),
        ("L_bo", |r| r.l_bo),
    ];
    cols.iter()
        .map(|(name, f)| {
            let pts = reports
                .iter()
                .map(|r| (r.step as f64, f(r)))
                .filter(|(_, v)| v.is_finite() && *v > 0.0)
                .collect::<Vec<_>>();
            (*name, pts)
        })
        .filter(|(_, p)| !p.is_empty())
        .collect()
}

/// Loss terms against step on a log axis, with the curriculum phase
/// boundaries marked.
pub fn loss_curves(reports: &[LossReport], out: &Path) -> Result<()> {
    if reports.is_empty() {
        return Err(HrError::Format("no loss reports to plot".into()));
    }
    let lines = series(reports);
    if lines.is_empty() {
        return Err(HrError::Format("every loss term is zero or non-finite".into()));
    }
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (_, pts) in &lines {
        for (_, v) in pts {
            lo = lo.min(*v);
            hi = hi.max(*v);
        }
    }
    let (lo, hi) = (lo * 0.8, hi * 1.25);
    let last = reports.iter().map(|r| r.step).max().unwrap_or(0) as f64;
    let x_max = (last + 1.0).max(1.0);

    let root = SVGBackend::new(out, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(draw_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("training losses", ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(64)
        .build_cartesian_2d(0.0..x_max, (lo..hi).log_scale())
        .map_err(draw_err)?;
    chart
        .configure_mesh()
        .x_desc("step")
        .y_desc("loss")
        .y_label_formatter(&|v| format!("{v:.0e}"))
        .draw()
        .map_err(draw_err)?;

    // Total steps are unknown from the log alone; the boundaries are placed
    // where the recorded phase changes.
    for w in reports.windows(2) {
        if w[0].phase != w[1].phase {
            let x = w[1].step as f64;
            chart
                .draw_series(LineSeries::new([(x, lo), (x, hi)], BLACK.mix(0.35).stroke_width(1)))
                .map_err(draw_err)?;
        }
    }
    for (k, (name, pts)) in lines.into_iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        chart
            .draw_series(LineSeries::new(pts, color.stroke_width(2)))
            .map_err(draw_err)?
            .label(name)
            .legend(move |(x, y)| PathElement::new([(x, y), (x + 18, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.85))
        .border_style(BLACK)
        .position(SeriesLabelPosition::UpperRight)
        .draw()
        .map_err(draw_err)?;
    root.present().map_err(draw_err)?;
    Ok(())
}

/// Grouped bars: one cluster per scale, one bar per named group.
pub fn cka_bars(groups: &[(String, [f64; NUM_LEVELS])], out: &Path) -> Result<()> {
    if groups.is_empty() {
        return Err(HrError::Format("no CKA groups to plot".into()));
    }
    if groups.iter().any(|(_, v)| v.iter().any(|x| !x.is_finite())) {
        return Err(HrError::Format("CKA values must be finite".into()));
    }
    let n = groups.len() as f64;
    let root = SVGBackend::new(out, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(draw_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("cross-modal CKA per scale", ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(52)
        .build_cartesian_2d(0.0..NUM_LEVELS as f64, 0.0..1.0f64)
        .map_err(draw_err)?;
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(NUM_LEVELS * 2 + 1)
        .x_label_formatter(&|x| {
            let c = x - x.floor();
            if (c - 0.5).abs() < 1e-6 {
                format!("scale {}", x.floor() as usize)
            } else {
                String::new()
            }
        })
        .y_desc("CKA")
        .draw()
        .map_err(draw_err)?;
    let width = 0.8 / n;
    for (g, (name, values)) in groups.iter().enumerate() {
        let color = PALETTE[g % PALETTE.len()];
        chart
            .draw_series(values.iter().enumerate().map(|(s, v)| {
                let x0 = s as f64 + 0.1 + g as f64 * width;
                Rectangle::new([(x0, 0.0), (x0 + width * 0.9, v.clamp(0.0, 1.0))], color.filled())
            }))
            .map_err(draw_err)?
            .label(name.as_str())
            .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 12, y + 5)], color.filled()));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.85))
        .border_style(BLACK)
        .position(SeriesLabelPosition::UpperRight)
        .draw()
        .map_err(draw_err)?;
    root.present().map_err(draw_err)?;
    Ok(())
}

/// One panel per scale with shared and private gate histograms overlaid.
pub fn gate_histograms(d: &GateDiagnostics, out: &Path) -> Result<()> {
    if d.scales.is_empty() || d.bins == 0 {
        return Err(HrError::Format("gate report has no scales".into()));
    }
    let root = SVGBackend::new(out, (SIZE.0 + 300, SIZE.1)).into_drawing_area();
    root.fill(&WHITE).map_err(draw_err)?;
    let panels = root.split_evenly((1, d.scales.len()));
    let w = 1.0 / d.bins as f64;
    for (panel, s) in panels.iter().zip(&d.scales) {
        if s.alpha_shared.len() != d.bins || s.alpha_private.len() != d.bins {
            return Err(HrError::Format(format!("scale {}: histogram length differs from bins", s.scale)));
        }
        let total = |h: &[u64]| h.iter().sum::<u64>().max(1) as f64;
        let (ts, tp) = (total(&s.alpha_shared), total(&s.alpha_private));
        let peak = s
            .alpha_shared
            .iter()
            .map(|c| *c as f64 / ts)
            .chain(s.alpha_private.iter().map(|c| *c as f64 / tp))
            .fold(0.0f64, f64::max)
            .max(1e-3);
        let mut chart = ChartBuilder::on(panel)
            .caption(format!("scale {}  γ={:.3}", s.scale, s.gamma), ("sans-serif", 16))
            .margin(6)
            .x_label_area_size(28)
            .y_label_area_size(40)
            .build_cartesian_2d(0.0..1.0f64, 0.0..peak * 1.1)
            .map_err(draw_err)?;
        chart.configure_mesh().x_labels(3).y_labels(4).draw().map_err(draw_err)?;
        for (hist, t, color) in [(&s.alpha_shared, ts, PALETTE[0]), (&s.alpha_private, tp, PALETTE[1])] {
            chart
                .draw_series(hist.iter().enumerate().map(|(k, c)| {
                    let x0 = k as f64 * w;
                    Rectangle::new([(x0, 0.0), (x0 + w, *c as f64 / t)], color.mix(0.55).filled())
                }))
                .map_err(draw_err)?;
        }
    }
    root.present().map_err(draw_err)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::phase;

    fn reports(n: usize) -> Vec<LossReport> {
        (0..n)
            .map(|i| {
                let p = i as f64 / n as f64;
                let v = 1.0 / (1.0 + i as f64);
                LossReport {
                    step: i,
                    phase: phase(p),
                    l_r: v,
                    l_n: 2.0 * v,
                    l_s: 0.1 * v,
                    l_tri: 0.0,
                    l_cs: 0.0,
                    l_ccd: 0.0,
                    l_bo: 1e-3 * v,
                    total: 10.0 * v,
                }
            })
            .collect()
    }

    #[test]
    fn empty_and_malformed_logs_are_rejected() {
        assert!(matches!(parse_metrics_log(""), Err(HrError::Format(_))));
        assert!(matches!(parse_metrics_log("\n  \n"), Err(HrError::Format(_))));
        assert!(matches!(parse_metrics_log("{\"step\": 1}"), Err(HrError::Format(_))));
        let line = serde_json::to_string(&reports(1)[0]).unwrap();
        assert_eq!(parse_metrics_log(&format!("{line}\n\n{line}\n")).unwrap().len(), 2);
    }

    #[test]
    fn figures_are_byte_identical_across_runs() {
        let dir = tempfile::tempdir().unwrap();
        let rs = reports(40);
        let groups = vec![("msbn".to_string(), [0.9, 0.8, 0.7, 0.6, 0.5]), ("none".to_string(), [0.5, 0.4, 0.3, 0.2, 0.1])];
        let mut gates = GateDiagnostics::new(10);
        for s in &mut gates.scales {
            s.gamma = 0.1;
            s.alpha_shared[7] = 5;
            s.alpha_private[2] = 3;
        }
        for k in 0..2 {
            loss_curves(&rs, &dir.path().join(format!("loss{k}.svg"))).unwrap();
            cka_bars(&groups, &dir.path().join(format!("cka{k}.svg"))).unwrap();
            gate_histograms(&gates, &dir.path().join(format!("gates{k}.svg"))).unwrap();
        }
        for name in ["loss", "cka", "gates"] {
            let a = std::fs::read(dir.path().join(format!("{name}0.svg"))).unwrap();
            let b = std::fs::read(dir.path().join(format!("{name}1.svg"))).unwrap();
            assert!(a.starts_with(b"<svg"));
            assert_eq!(a, b, "{name} differs");
        }
        let cka = std::fs::read_to_string(dir.path().join("cka0.svg")).unwrap();
        assert!(cka.matches("<rect").count() >= 10);
    }

    #[test]
    fn bad_inputs_are_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.svg");
        assert!(matches!(loss_curves(&[], &p), Err(HrError::Format(_))));
        assert!(matches!(cka_bars(&[], &p), Err(HrError::Format(_))));
        assert!(matches!(cka_bars(&[("a".into(), [f64::NAN; 5])], &p), Err(HrError::Format(_))));
    }
}
