//! Minimal self-contained SVG line charts. Non-finite points are skipped and
//! break the line.

use std::fmt::Write as _;

const PANEL_W: f64 = 640.0;
const PANEL_H: f64 = 300.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 140.0;
const MARGIN_T: f64 = 30.0;
const MARGIN_B: f64 = 40.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

pub struct Series<'a> {
    pub name: &'a str,
    pub values: &'a [f64],
}

pub struct Panel<'a> {
    pub title: &'a str,
    pub y_label: &'a str,
    pub series: Vec<Series<'a>>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn y_range(series: &[Series<'_>]) -> (f64, f64) {
    let (lo, hi) = series
        .iter()
        .flat_map(|s| s.values.iter().copied())
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        let pad = lo.abs().max(1.0) * 1e-3;
        return (lo - pad, hi + pad);
    }
    let pad = (hi - lo) * 0.05;
    (lo - pad, hi + pad)
}

fn draw_panel(out: &mut String, panel: &Panel<'_>, top: f64) {
    let plot_w = PANEL_W - MARGIN_L - MARGIN_R;
    let plot_h = PANEL_H - MARGIN_T - MARGIN_B;
    let x0 = MARGIN_L;
    let y0 = top + MARGIN_T;
    let n = panel.series.iter().map(|s| s.values.len()).max().unwrap_or(0);
    let x_max = n.saturating_sub(1).max(1) as f64;
    let (lo, hi) = y_range(&panel.series);
    let px = |i: usize| x0 + plot_w * i as f64 / x_max;
    let py = |v: f64| y0 + plot_h * (1.0 - (v - lo) / (hi - lo));

    writeln!(out, r#"<text x="{}" y="{}" font-size="14" font-weight="bold">{}</text>"#, x0, top + 18.0, escape(panel.title)).unwrap();
    writeln!(out, r##"<rect x="{x0}" y="{y0}" width="{plot_w}" height="{plot_h}" fill="none" stroke="#444"/>"##).unwrap();
    for k in 0..=4 {
        let v = lo + (hi - lo) * k as f64 / 4.0;
        let y = py(v);
        writeln!(out, r##"<line x1="{}" y1="{y:.2}" x2="{x0}" y2="{y:.2}" stroke="#444"/>"##, x0 - 4.0).unwrap();
        writeln!(out, r#"<text x="{}" y="{:.2}" font-size="10" text-anchor="end">{}</text>"#, x0 - 6.0, y + 3.0, format_tick(v)).unwrap();
    }
    let ticks = 5.min(n.saturating_sub(1)).max(1);
    for k in 0..=ticks {
        let i = (x_max as usize * k) / ticks;
        let x = px(i);
        writeln!(out, r##"<line x1="{x:.2}" y1="{}" x2="{x:.2}" y2="{}" stroke="#444"/>"##, y0 + plot_h, y0 + plot_h + 4.0).unwrap();
        writeln!(out, r#"<text x="{x:.2}" y="{}" font-size="10" text-anchor="middle">{i}</text>"#, y0 + plot_h + 16.0).unwrap();
    }
    writeln!(out, r#"<text x="{}" y="{}" font-size="11" text-anchor="middle">step</text>"#, x0 + plot_w / 2.0, y0 + plot_h + 32.0).unwrap();
    writeln!(
        out,
        r#"<text x="14" y="{:.2}" font-size="11" text-anchor="middle" transform="rotate(-90 14 {:.2})">{}</text>"#,
        y0 + plot_h / 2.0,
        y0 + plot_h / 2.0,
        escape(panel.y_label)
    )
    .unwrap();

    for (k, s) in panel.series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let mut d = String::new();
        let mut pen_down = false;
        for (i, &v) in s.values.iter().enumerate() {
            if !v.is_finite() {
                pen_down = false;
                continue;
            }
            write!(d, "{}{:.2} {:.2} ", if pen_down { 'L' } else { 'M' }, px(i), py(v)).unwrap();
            pen_down = true;
        }
        if !d.is_empty() {
            writeln!(out, r#"<path d="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, d.trim_end()).unwrap();
        }
        let ly = y0 + 12.0 + 18.0 * k as f64;
        let lx = x0 + plot_w + 12.0;
        writeln!(out, r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, lx + 18.0).unwrap();
        writeln!(out, r#"<text x="{}" y="{}" font-size="11">{}</text>"#, lx + 22.0, ly + 4.0, escape(s.name)).unwrap();
    }
}

fn format_tick(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-3 || v.abs() >= 1e4) {
        format!("{v:.2e}")
    } else {
        format!("{v:.4}")
    }
}

/// Stacks the panels vertically in one SVG document.
pub fn line_charts(panels: &[Panel<'_>]) -> String {
    let height = PANEL_H * panels.len().max(1) as f64;
    let mut out = String::new();
    writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{PANEL_W}" height="{height}" viewBox="0 0 {PANEL_W} {height}" font-family="sans-serif">"#
    )
    .unwrap();
    writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    for (k, p) in panels.iter().enumerate() {
        draw_panel(&mut out, p, PANEL_H * k as f64);
    }
    out.push_str("</svg>\n");
    out
}
