//! Self-contained SVG charts drawn from the CLI's CSV tables. Nothing here
//! recomputes analytics; it only aggregates across seeds for display.

use std::collections::BTreeMap;
use std::fmt::Write;

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];
const PANEL_W: f64 = 360.0;
const PANEL_H: f64 = 240.0;
const MARGIN: f64 = 48.0;

pub struct Line {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    /// Lower and upper band edge per point.
    pub band: Option<Vec<(f64, f64)>>,
}

pub struct Panel {
    pub title: String,
    pub lines: Vec<Line>,
    pub y_label: String,
}

/// Steps are spread on `ln(1 + step)` to match the log-spaced schedule.
fn x_of(step: f64) -> f64 {
    step.max(0.0).ln_1p()
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

struct Frame {
    ox: f64,
    oy: f64,
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        self.ox + MARGIN + (x - self.x0) / (self.x1 - self.x0).max(1e-12) * (PANEL_W - 1.5 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        self.oy + PANEL_H - MARGIN + -(y - self.y0) / (self.y1 - self.y0).max(1e-12) * (PANEL_H - 1.5 * MARGIN)
    }
}

fn frame_for(panel: &Panel, ox: f64, oy: f64) -> Frame {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for l in &panel.lines {
        for &(x, y) in &l.points {
            xs.push(x_of(x));
            ys.push(y);
        }
        for &(lo, hi) in l.band.iter().flatten() {
            ys.push(lo);
            ys.push(hi);
        }
    }
    let min = |v: &[f64]| v.iter().copied().filter(|x| x.is_finite()).fold(f64::INFINITY, f64::min);
    let max = |v: &[f64]| v.iter().copied().filter(|x| x.is_finite()).fold(f64::NEG_INFINITY, f64::max);
    let (mut y0, mut y1) = (min(&ys), max(&ys));
    if !y0.is_finite() {
        (y0, y1) = (0.0, 1.0);
    }
    if y1 - y0 < 1e-12 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let (x0, x1) = if xs.is_empty() { (0.0, 1.0) } else { (min(&xs), max(&xs).max(min(&xs) + 1e-9)) };
    Frame { ox, oy, x0, x1, y0, y1 }
}

fn axes(svg: &mut String, f: &Frame, title: &str, y_label: &str) {
    let (l, r) = (f.px(f.x0), f.px(f.x1));
    let (b, t) = (f.py(f.y0), f.py(f.y1));
    let _ = writeln!(svg, r##"<rect x="{l:.1}" y="{t:.1}" width="{:.1}" height="{:.1}" fill="none" stroke="#888"/>"##, r - l, b - t);
    let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" font-size="13" text-anchor="middle">{}</text>"#, (l + r) / 2.0, f.oy + 18.0, escape(title));
    let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="middle">step (log scale)</text>"#, (l + r) / 2.0, b + 30.0);
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="middle" transform="rotate(-90 {:.1} {:.1})">{}</text>"#,
        f.ox + 12.0,
        (t + b) / 2.0,
        f.ox + 12.0,
        (t + b) / 2.0,
        escape(y_label)
    );
    for i in 0..=4 {
        let y = f.y0 + (f.y1 - f.y0) * i as f64 / 4.0;
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" font-size="9" text-anchor="end">{}</text>"#, l - 4.0, f.py(y) + 3.0, tick(y));
    }
    for step in [0.0, 1e1, 1e2, 1e3, 1e4, 1e5] {
        let x = x_of(step);
        if x >= f.x0 - 1e-9 && x <= f.x1 + 1e-9 {
            let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" font-size="9" text-anchor="middle">{}</text>"#, f.px(x), b + 14.0, tick(step));
        }
    }
}

fn tick(v: f64) -> String {
    if v.abs() >= 1000.0 {
        format!("{:.0}k", v / 1000.0)
    } else if v.fract() == 0.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

fn polyline(points: impl Iterator<Item = (f64, f64)>) -> String {
    points.map(|(x, y)| format!("{x:.1},{y:.1}")).collect::<Vec<_>>().join(" ")
}

fn grid(n: usize) -> (usize, usize) {
    let cols = n.clamp(1, 3);
    (cols, n.div_ceil(cols).max(1))
}

fn open_svg(width: f64, height: f64) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{height:.0}\" viewBox=\"0 0 {width:.0} {height:.0}\" font-family=\"sans-serif\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    )
}

/// Line charts, one panel per entry, with optional shaded bands and a legend.
pub fn line_panels(panels: &[Panel]) -> String {
    let (cols, rows) = grid(panels.len());
    let mut labels: Vec<&str> = Vec::new();
    for p in panels {
        for l in &p.lines {
            if !labels.contains(&l.label.as_str()) {
                labels.push(&l.label);
            }
        }
    }
    let legend_h = 18.0 * labels.len() as f64 + 10.0;
    let mut svg = open_svg(cols as f64 * PANEL_W, rows as f64 * PANEL_H + legend_h);
    for (i, p) in panels.iter().enumerate() {
        let f = frame_for(p, (i % cols) as f64 * PANEL_W, (i / cols) as f64 * PANEL_H);
        axes(&mut svg, &f, &p.title, &p.y_label);
        for l in &p.lines {
            let color = PALETTE[labels.iter().position(|x| *x == l.label).unwrap_or(0) % PALETTE.len()];
            if let Some(band) = &l.band {
                let upper = l.points.iter().zip(band).map(|(&(x, _), &(_, hi))| (f.px(x_of(x)), f.py(hi)));
                let lower = l.points.iter().zip(band).rev().map(|(&(x, _), &(lo, _))| (f.px(x_of(x)), f.py(lo)));
                let _ = writeln!(svg, r#"<polygon points="{}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#, polyline(upper.chain(lower)));
            }
            let pts = l.points.iter().filter(|(_, y)| y.is_finite()).map(|&(x, y)| (f.px(x_of(x)), f.py(y)));
            let _ = writeln!(svg, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#, polyline(pts));
        }
    }
    let top = rows as f64 * PANEL_H + 4.0;
    for (i, label) in labels.iter().enumerate() {
        let y = top + 18.0 * i as f64;
        let color = PALETTE[i % PALETTE.len()];
        let _ = writeln!(svg, r#"<rect x="{MARGIN}" y="{y:.1}" width="12" height="12" fill="{color}"/>"#);
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" font-size="11">{}</text>"#, MARGIN + 18.0, y + 10.0, escape(label));
    }
    svg.push_str("</svg>\n");
    svg
}

/// Quantile with linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Centre and band of `values`: median with quartiles, or mean with one std.
pub fn summarize(values: &[f64], mean_std: bool) -> (f64, f64, f64) {
    if mean_std {
        let n = values.len() as f64;
        let m = values.iter().sum::<f64>() / n;
        let sd = if values.len() > 1 { (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
        (m, m - sd, m + sd)
    } else {
        let mut s = values.to_vec();
        s.sort_by(f64::total_cmp);
        (quantile(&s, 0.5), quantile(&s, 0.25), quantile(&s, 0.75))
    }
}

/// Map strips: one panel per size, one row per seed, one colour per state,
/// with fork positions marked.
pub fn map_strips(maps: &[(String, u64, Vec<u64>, Vec<usize>, Vec<usize>)]) -> String {
    let mut by_size: BTreeMap<&str, Vec<&(String, u64, Vec<u64>, Vec<usize>, Vec<usize>)>> = BTreeMap::new();
    for m in maps {
        by_size.entry(&m.0).or_default().push(m);
    }
    let (cols, rows) = grid(by_size.len());
    let k = maps.iter().flat_map(|m| m.3.iter()).max().map_or(1, |s| s + 1);
    let legend_h = 18.0 * k as f64 + 10.0;
    let mut svg = open_svg(cols as f64 * PANEL_W, rows as f64 * PANEL_H + legend_h);
    for (i, (size, runs)) in by_size.iter().enumerate() {
        let ox = (i % cols) as f64 * PANEL_W;
        let oy = (i / cols) as f64 * PANEL_H;
        let max_x = runs.iter().flat_map(|r| r.2.iter()).map(|&s| x_of(s as f64)).fold(0.0, f64::max).max(1e-9);
        let width = PANEL_W - 1.5 * MARGIN;
        let row_h = ((PANEL_H - 1.5 * MARGIN) / runs.len() as f64).min(16.0);
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" font-size="13" text-anchor="middle">{}</text>"#, ox + MARGIN + width / 2.0, oy + 18.0, escape(size));
        for (r, run) in runs.iter().enumerate() {
            let y = oy + MARGIN * 0.5 + r as f64 * row_h;
            let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" font-size="9" text-anchor="end">seed {}</text>"#, ox + MARGIN - 4.0, y + row_h * 0.7, run.1);
            for t in 0..run.2.len() {
                let x0 = ox + MARGIN + x_of(run.2[t] as f64) / max_x * width;
                let x1 = if t + 1 < run.2.len() { ox + MARGIN + x_of(run.2[t + 1] as f64) / max_x * width } else { x0 + 2.0 };
                let color = PALETTE[run.3[t] % PALETTE.len()];
                let _ = writeln!(svg, r#"<rect x="{x0:.2}" y="{y:.1}" width="{:.2}" height="{:.1}" fill="{color}"/>"#, (x1 - x0).max(0.5), row_h * 0.85);
            }
            for &f in &run.4 {
                let x = ox + MARGIN + x_of(run.2[f] as f64) / max_x * width;
                let _ = writeln!(svg, r#"<line x1="{x:.1}" y1="{y:.1}" x2="{x:.1}" y2="{:.1}" stroke="black" stroke-width="1.5"/>"#, y + row_h * 0.85);
            }
        }
    }
    let top = rows as f64 * PANEL_H + 4.0;
    for s in 0..k {
        let y = top + 18.0 * s as f64;
        let _ = writeln!(svg, r#"<rect x="{MARGIN}" y="{y:.1}" width="12" height="12" fill="{}"/>"#, PALETTE[s % PALETTE.len()]);
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" font-size="11">state {s}</text>"#, MARGIN + 18.0, y + 10.0);
    }
    svg.push_str("</svg>\n");
    svg
}
