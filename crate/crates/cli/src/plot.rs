//! SVG rendering of track results (heatmap projections) and metrics reports.

use std::fmt::Write;

use serde_json::Value;
use tlt_core::metrics::MetricsReport;
use tlt_core::pipeline::TrackResult;

const CELL: f64 = 24.0;
const MARGIN: f64 = 30.0;

pub fn render(value: &Value) -> Result<String, String> {
    if value.get("heatmap").is_some() {
        let t: TrackResult = serde_json::from_value(value.clone()).map_err(|e| format!("track result: {e}"))?;
        heatmap_svg(&t)
    } else if value.get("cpm_at_radius").is_some() {
        let r: MetricsReport = serde_json::from_value(value.clone()).map_err(|e| format!("metrics report: {e}"))?;
        Ok(report_svg(&r))
    } else {
        Err("expected a metrics report or a track result".into())
    }
}

/// Five-stop approximation of a perceptual dark-to-bright ramp.
fn color(v: f64) -> String {
    const STOPS: [[f64; 3]; 5] = [
        [68.0, 1.0, 84.0],
        [59.0, 82.0, 139.0],
        [33.0, 145.0, 140.0],
        [94.0, 201.0, 98.0],
        [253.0, 231.0, 37.0],
    ];
    let v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
    let pos = v * (STOPS.len() - 1) as f64;
    let i = (pos.floor() as usize).min(STOPS.len() - 2);
    let f = pos - i as f64;
    let c: Vec<u8> = (0..3)
        .map(|k| (STOPS[i][k] + f * (STOPS[i + 1][k] - STOPS[i][k])).round() as u8)
        .collect();
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

fn header(width: f64, height: f64) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\" font-family=\"sans-serif\" font-size=\"13\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    )
}

/// Maximum intensity projections of the heatmap along z, y and x, with the
/// predicted center marked.
fn heatmap_svg(t: &TrackResult) -> Result<String, String> {
    let [d, h, w] = t.heatmap_dims;
    if d * h * w != t.heatmap.len() || t.heatmap.is_empty() {
        return Err(format!("heatmap has {} values for dims {:?}", t.heatmap.len(), t.heatmap_dims));
    }
    let at = |z: usize, y: usize, x: usize| t.heatmap[(z * h + y) * w + x];
    let peak = t.heatmap.iter().cloned().fold(f64::MIN, f64::max).max(f64::MIN_POSITIVE);
    // center in fractional heatmap cells, [x, y, z]
    let cell: Vec<f64> = (0..3).map(|i| (t.center[i] - t.heatmap_origin[i]) / t.heatmap_spacing[i]).collect();

    // (title, rows, cols, value(r, c), marker (col, row))
    type Panel<'a> = (&'a str, usize, usize, Box<dyn Fn(usize, usize) -> f64 + 'a>, (f64, f64));
    let panels: [Panel; 3] = [
        ("axial (max over z)", h, w, Box::new(|r, c| (0..d).map(|z| at(z, r, c)).fold(0.0, f64::max)), (cell[0], cell[1])),
        ("coronal (max over y)", d, w, Box::new(|r, c| (0..h).map(|y| at(r, y, c)).fold(0.0, f64::max)), (cell[0], cell[2])),
        ("sagittal (max over x)", d, h, Box::new(|r, c| (0..w).map(|x| at(r, c, x)).fold(0.0, f64::max)), (cell[1], cell[2])),
    ];
    let width = panels.iter().map(|p| p.2 as f64 * CELL + MARGIN).sum::<f64>() + MARGIN;
    let tallest = panels.iter().map(|p| p.1).max().unwrap_or(1) as f64;
    let height = tallest * CELL + 3.0 * MARGIN + 20.0;
    let mut s = header(width, height);
    let mut left = MARGIN;
    for (title, rows, cols, value, (mx, my)) in &panels {
        let top = 2.0 * MARGIN;
        let _ = writeln!(s, "<text x=\"{left}\" y=\"{}\">{title}</text>", top - 8.0);
        for r in 0..*rows {
            for c in 0..*cols {
                let _ = writeln!(
                    s,
                    "<rect x=\"{}\" y=\"{}\" width=\"{CELL}\" height=\"{CELL}\" fill=\"{}\"/>",
                    left + c as f64 * CELL,
                    top + r as f64 * CELL,
                    color(value(r, c) / peak)
                );
            }
        }
        // cell i covers [i - 0.5, i + 0.5] around its center
        let _ = writeln!(
            s,
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"5\" fill=\"none\" stroke=\"red\" stroke-width=\"2\"/>",
            left + (mx + 0.5) * CELL,
            top + (my + 0.5) * CELL
        );
        left += *cols as f64 * CELL + MARGIN;
    }
    let _ = writeln!(
        s,
        "<text x=\"{MARGIN}\" y=\"{}\">center [{:.2}, {:.2}, {:.2}] mm, {} tokens, registration cost {:.4}</text>",
        height - 12.0,
        t.center[0],
        t.center[1],
        t.center[2],
        t.tokens,
        t.registration_cost
    );
    s.push_str("</svg>\n");
    Ok(s)
}

/// Metrics table plus bars for both accuracies.
fn report_svg(r: &MetricsReport) -> String {
    let table = r.table();
    let lines: Vec<&str> = table.lines().collect();
    let bar_w = 400.0;
    let width = (lines.iter().map(|l| l.chars().count()).max().unwrap_or(0) as f64 * 8.0).max(bar_w + 140.0) + 2.0 * MARGIN;
    let height = MARGIN + lines.len() as f64 * 18.0 + 2.0 * 30.0 + 2.0 * MARGIN;
    let mut s = header(width, height);
    for (i, l) in lines.iter().enumerate() {
        let _ = writeln!(
            s,
            "<text x=\"{MARGIN}\" y=\"{}\" font-family=\"monospace\" xml:space=\"preserve\">{}</text>",
            MARGIN + i as f64 * 18.0,
            escape(l)
        );
    }
    let mut y = MARGIN + lines.len() as f64 * 18.0 + 20.0;
    for (name, v) in [("CPM@10mm", r.cpm_at_10mm), ("CPM@Radius", r.cpm_at_radius)] {
        let len = bar_w * v.clamp(0.0, 100.0) / 100.0;
        let _ = writeln!(s, "<text x=\"{MARGIN}\" y=\"{}\">{name}</text>", y + 15.0);
        let _ = writeln!(
            s,
            "<rect x=\"{}\" y=\"{y}\" width=\"{bar_w}\" height=\"20\" fill=\"#eeeeee\"/>\
             <rect x=\"{}\" y=\"{y}\" width=\"{len:.2}\" height=\"20\" fill=\"{}\"/>\
             <text x=\"{}\" y=\"{}\">{v:.1}%</text>",
            MARGIN + 100.0,
            MARGIN + 100.0,
            color(v / 100.0),
            MARGIN + 110.0 + bar_w,
            y + 15.0
        );
        y += 30.0;
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
