//! Minimal static SVG charts.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 360.0;
const MARGIN: f64 = 48.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub values: Vec<f64>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn header(title: &str) -> String {
    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#).unwrap();
    writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, escape(title)).unwrap();
    s
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    (lo, hi)
}

fn axes(s: &mut String, lo: f64, hi: f64, x_label: &str) {
    let (x0, y0, x1, y1) = (MARGIN, H - MARGIN, W - MARGIN / 2.0, MARGIN);
    writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#).unwrap();
    writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#).unwrap();
    for (v, y) in [(lo, y0), (hi, y1)] {
        writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{v:.3}</text>"#, x0 - 4.0, y + 4.0).unwrap();
    }
    writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, (x0 + x1) / 2.0, H - 12.0, escape(x_label)).unwrap();
}

/// Line chart of several series over a shared integer x axis.
pub fn line_plot_svg(title: &str, x_label: &str, series: &[Series]) -> String {
    let mut s = header(title);
    let (lo, hi) = range(series.iter().flat_map(|r| r.values.iter().copied()));
    axes(&mut s, lo, hi, x_label);
    let n = series.iter().map(|r| r.values.len()).max().unwrap_or(0);
    let sx = (W - 1.5 * MARGIN) / (n.saturating_sub(1).max(1)) as f64;
    let sy = (H - 2.0 * MARGIN) / (hi - lo);
    for (k, r) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let pts: Vec<String> = r
            .values
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(i, v)| format!("{:.1},{:.1}", MARGIN + i as f64 * sx, H - MARGIN - (v - lo) * sy))
            .collect();
        writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.2" points="{}"/>"#, pts.join(" ")).unwrap();
        writeln!(s, r#"<text x="{}" y="{}" fill="{color}">{}</text>"#, W - 200.0, 40.0 + 14.0 * k as f64, escape(&r.name)).unwrap();
    }
    s.push_str("</svg>\n");
    s
}

/// Grouped bar chart: one group per label, one bar per series.
pub fn bar_chart_svg(title: &str, labels: &[String], series: &[Series]) -> String {
    let mut s = header(title);
    let (lo, hi) = range(series.iter().flat_map(|r| r.values.iter().copied()).chain([0.0]));
    axes(&mut s, lo, hi, "");
    let groups = labels.len().max(1);
    let gw = (W - 1.5 * MARGIN) / groups as f64;
    let bw = gw * 0.8 / series.len().max(1) as f64;
    let sy = (H - 2.0 * MARGIN) / (hi - lo);
    let zero = H - MARGIN - (0.0 - lo) * sy;
    for (g, label) in labels.iter().enumerate() {
        let gx = MARGIN + g as f64 * gw + gw * 0.1;
        for (k, r) in series.iter().enumerate() {
            let Some(&v) = r.values.get(g).filter(|v| v.is_finite()) else { continue };
            let y = H - MARGIN - (v - lo) * sy;
            let (top, h) = if y < zero { (y, zero - y) } else { (zero, y - zero) };
            writeln!(
                s,
                r#"<rect x="{:.1}" y="{top:.1}" width="{bw:.1}" height="{h:.1}" fill="{}"/>"#,
                gx + k as f64 * bw,
                COLORS[k % COLORS.len()]
            )
            .unwrap();
        }
        writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#, gx + gw * 0.4, H - MARGIN + 14.0, escape(label)).unwrap();
    }
    for (k, r) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        writeln!(s, r#"<text x="{}" y="{}" fill="{color}">{}</text>"#, W - 200.0, 40.0 + 14.0 * k as f64, escape(&r.name)).unwrap();
    }
    s.push_str("</svg>\n");
    s
}
