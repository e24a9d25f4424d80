//! Minimal SVG charts: line charts and bar charts with linear axes.
//! Coordinates are printed with two decimals so output bytes are stable.

use std::fmt::Write;

const W: f64 = 520.0;
const H: f64 = 340.0;
const LEFT: f64 = 56.0;
const RIGHT: f64 = 130.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 46.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

/// Label, value and optional (min, max) whisker.
pub type Bar = (String, f64, Option<(f64, f64)>);

pub struct Axes {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn header(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{:.2}" y="18" text-anchor="middle" font-size="13">{}</text>"#, LEFT + plot_w() / 2.0, escape(title));
}

fn plot_w() -> f64 {
    W - LEFT - RIGHT
}

fn plot_h() -> f64 {
    H - TOP - BOTTOM
}

fn ticks(lo: f64, hi: f64) -> Vec<f64> {
    let span = (hi - lo).max(1e-12);
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|s| *s >= raw).unwrap_or(10.0 * mag);
    let first = (lo / step).ceil();
    (0..)
        .map(|k| (first + k as f64) * step)
        .take_while(|t| *t <= hi + 1e-9 * span)
        .map(|t| if t.abs() < 1e-12 * span { 0.0 } else { t })
        .collect()
}

fn frame(out: &mut String, axes: &Axes, x_ticks: &[(f64, String)]) {
    let (x0, y0, pw, ph) = (LEFT, TOP, plot_w(), plot_h());
    let (ylo, yhi) = axes.y_range;
    for t in ticks(ylo, yhi) {
        let y = y0 + ph * (1.0 - (t - ylo) / (yhi - ylo));
        let _ = writeln!(out, r##"<line x1="{x0:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#e0e0e0"/>"##, x0 + pw);
        let _ = writeln!(out, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#, x0 - 6.0, y + 4.0, fmt_tick(t));
    }
    for (x, label) in x_ticks {
        let _ = writeln!(out, r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, y0 + ph + 16.0, escape(label));
    }
    let _ = writeln!(out, r##"<rect x="{x0:.2}" y="{y0:.2}" width="{pw:.2}" height="{ph:.2}" fill="none" stroke="#333"/>"##);
    let _ = writeln!(out, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, x0 + pw / 2.0, H - 8.0, escape(&axes.x_label));
    let _ = writeln!(
        out,
        r#"<text x="14" y="{:.2}" text-anchor="middle" transform="rotate(-90 14 {:.2})">{}</text>"#,
        y0 + ph / 2.0,
        y0 + ph / 2.0,
        escape(&axes.y_label)
    );
}

fn fmt_tick(t: f64) -> String {
    let s = format!("{t:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".into() } else { s.into() }
}

fn legend(out: &mut String, labels: &[&str]) {
    let x = LEFT + plot_w() + 12.0;
    for (i, l) in labels.iter().enumerate() {
        let y = TOP + 10.0 + 18.0 * i as f64;
        let c = PALETTE[i % PALETTE.len()];
        let _ = writeln!(out, r#"<rect x="{x:.2}" y="{:.2}" width="12" height="4" fill="{c}"/>"#, y - 4.0);
        let _ = writeln!(out, r#"<text x="{:.2}" y="{:.2}">{}</text>"#, x + 18.0, y + 1.0, escape(l));
    }
}

pub fn line_chart(axes: &Axes, series: &[Series]) -> String {
    let mut out = String::new();
    header(&mut out, &axes.title);
    let (xlo, xhi) = axes.x_range;
    let (ylo, yhi) = axes.y_range;
    let sx = |x: f64| LEFT + plot_w() * (x - xlo) / (xhi - xlo);
    let sy = |y: f64| TOP + plot_h() * (1.0 - (y - ylo) / (yhi - ylo));
    let x_ticks: Vec<(f64, String)> = ticks(xlo, xhi).into_iter().map(|t| (sx(t), fmt_tick(t))).collect();
    frame(&mut out, axes, &x_ticks);
    for (i, s) in series.iter().enumerate() {
        let c = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = s.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = writeln!(out, r#"<polyline fill="none" stroke="{c}" stroke-width="1.8" points="{}"/>"#, pts.join(" "));
        for &(x, y) in &s.points {
            let _ = writeln!(out, r#"<circle cx="{:.2}" cy="{:.2}" r="2" fill="{c}"/>"#, sx(x), sy(y));
        }
    }
    let labels: Vec<&str> = series.iter().map(|s| s.label.as_str()).collect();
    legend(&mut out, &labels);
    out.push_str("</svg>\n");
    out
}

/// One bar per entry with an optional min/max whisker.
pub fn bar_chart(axes: &Axes, bars: &[Bar]) -> String {
    let mut out = String::new();
    header(&mut out, &axes.title);
    let (ylo, yhi) = axes.y_range;
    let sy = |y: f64| TOP + plot_h() * (1.0 - (y - ylo) / (yhi - ylo));
    let slot = plot_w() / bars.len().max(1) as f64;
    let x_ticks: Vec<(f64, String)> = bars.iter().enumerate().map(|(i, b)| (LEFT + slot * (i as f64 + 0.5), b.0.clone())).collect();
    frame(&mut out, axes, &x_ticks);
    for (i, (_, v, range)) in bars.iter().enumerate() {
        let c = PALETTE[i % PALETTE.len()];
        let x = LEFT + slot * i as f64 + slot * 0.2;
        let (top, base) = (sy(*v), sy(ylo));
        let _ = writeln!(out, r#"<rect x="{x:.2}" y="{top:.2}" width="{:.2}" height="{:.2}" fill="{c}"/>"#, slot * 0.6, base - top);
        if let Some((lo, hi)) = range {
            let xm = x + slot * 0.3;
            let _ = writeln!(out, r##"<line x1="{xm:.2}" y1="{:.2}" x2="{xm:.2}" y2="{:.2}" stroke="#222"/>"##, sy(*lo), sy(*hi));
        }
    }
    out.push_str("</svg>\n");
    out
}
