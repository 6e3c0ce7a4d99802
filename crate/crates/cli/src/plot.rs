//! Self-contained SVG charts. Every chart is written next to a JSON sidecar
//! holding the exact numbers it draws.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Result;
use serde::{Deserialize, Serialize};

const WIDTH: f64 = 760.0;
const HEIGHT: f64 = 440.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxSummary {
    pub label: String,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum PlotData {
    /// Numeric x; `x_log2` spaces ticks by powers of two.
    Lines { x_label: String, y_label: String, x_log2: bool, series: Vec<Series> },
    Boxes { y_label: String, boxes: Vec<BoxSummary> },
    Bars { y_label: String, categories: Vec<String>, groups: Vec<Series> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plot {
    pub kind: String,
    pub title: String,
    pub data: PlotData,
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Maps data values to pixels along one axis.
struct Scale {
    lo: f64,
    hi: f64,
    from: f64,
    to: f64,
}

impl Scale {
    fn new(values: impl Iterator<Item = f64>, from: f64, to: f64, include_zero: bool) -> Scale {
        let (mut lo, mut hi) = values.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        if !lo.is_finite() {
            (lo, hi) = (0.0, 1.0);
        }
        if include_zero {
            lo = lo.min(0.0);
            hi = hi.max(0.0);
        }
        if hi - lo < 1e-12 {
            lo -= 0.5;
            hi += 0.5;
        }
        let pad = (hi - lo) * 0.05;
        Scale { lo: lo - pad, hi: hi + pad, from, to }
    }

    fn px(&self, v: f64) -> f64 {
        self.from + (v - self.lo) / (self.hi - self.lo) * (self.to - self.from)
    }

    fn ticks(&self) -> Vec<f64> {
        let span = self.hi - self.lo;
        let raw = span / 5.0;
        let mag = 10f64.powf(raw.log10().floor());
        let step = [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|s| *s >= raw).unwrap_or(10.0 * mag);
        let first = (self.lo / step).ceil() as i64;
        let last = (self.hi / step).floor() as i64;
        (first..=last).map(|k| k as f64 * step).collect()
    }
}

fn fmt_num(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 1000.0 || v.fract() == 0.0 {
        format!("{v:.0}")
    } else {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

fn frame(svg: &mut String, title: &str, y: &Scale, y_label: &str) {
    let (x0, x1) = (LEFT, WIDTH - RIGHT);
    let _ = writeln!(svg, r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#, (x0 + x1) / 2.0, esc(title));
    for t in y.ticks() {
        let py = y.px(t);
        let _ = writeln!(svg, r##"<line x1="{x0}" y1="{py:.2}" x2="{x1}" y2="{py:.2}" stroke="#e0e0e0"/>"##);
        let _ = writeln!(svg, r#"<text x="{}" y="{:.2}" text-anchor="end" font-size="11">{}</text>"#, x0 - 6.0, py + 4.0, fmt_num(t));
    }
    if y.lo < 0.0 && y.hi > 0.0 {
        let py = y.px(0.0);
        let _ = writeln!(svg, r##"<line x1="{x0}" y1="{py:.2}" x2="{x1}" y2="{py:.2}" stroke="#888888"/>"##);
    }
    let _ = writeln!(svg, r##"<rect x="{x0}" y="{TOP}" width="{}" height="{}" fill="none" stroke="#333333"/>"##, x1 - x0, HEIGHT - TOP - BOTTOM);
    let cy = (TOP + HEIGHT - BOTTOM) / 2.0;
    let _ = writeln!(svg, r#"<text x="16" y="{cy}" transform="rotate(-90 16 {cy})" text-anchor="middle" font-size="12">{}</text>"#, esc(y_label));
}

fn legend(svg: &mut String, names: &[&str]) {
    for (i, name) in names.iter().enumerate() {
        let (x, y) = (WIDTH - RIGHT + 14.0, TOP + 10.0 + 18.0 * i as f64);
        let c = PALETTE[i % PALETTE.len()];
        let _ = writeln!(svg, r#"<rect x="{x}" y="{}" width="12" height="12" fill="{c}"/>"#, y - 10.0);
        let _ = writeln!(svg, r#"<text x="{}" y="{y}" font-size="11">{}</text>"#, x + 18.0, esc(name));
    }
}

pub fn render_svg(plot: &Plot) -> String {
    let mut svg = String::new();
    let _ = writeln!(svg, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif">"#);
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let (x0, x1) = (LEFT, WIDTH - RIGHT);
    let (y_top, y_bottom) = (TOP, HEIGHT - BOTTOM);
    match &plot.data {
        PlotData::Lines { x_label, y_label, x_log2, series } => {
            let tx = |v: f64| if *x_log2 { v.max(f64::MIN_POSITIVE).log2() } else { v };
            let xs = Scale::new(series.iter().flat_map(|s| s.points.iter().map(|p| tx(p.0))), x0, x1, false);
            let ys = Scale::new(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)), y_bottom, y_top, true);
            frame(&mut svg, &plot.title, &ys, y_label);
            let mut xticks: Vec<f64> = series.iter().flat_map(|s| s.points.iter().map(|p| p.0)).collect();
            xticks.sort_by(f64::total_cmp);
            xticks.dedup();
            if !*x_log2 || xticks.len() > 12 {
                xticks = xs.ticks();
            }
            for t in xticks {
                let px = xs.px(tx(t));
                let _ = writeln!(svg, r#"<text x="{px:.2}" y="{}" text-anchor="middle" font-size="11">{}</text>"#, y_bottom + 16.0, fmt_num(t));
            }
            let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">{}</text>"#, (x0 + x1) / 2.0, HEIGHT - 18.0, esc(x_label));
            for (i, s) in series.iter().enumerate() {
                let c = PALETTE[i % PALETTE.len()];
                let pts: Vec<String> = s.points.iter().map(|p| format!("{:.2},{:.2}", xs.px(tx(p.0)), ys.px(p.1))).collect();
                let _ = writeln!(svg, r#"<polyline fill="none" stroke="{c}" stroke-width="1.8" points="{}"/>"#, pts.join(" "));
                if s.points.len() <= 30 {
                    for p in &s.points {
                        let _ = writeln!(svg, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{c}"/>"#, xs.px(tx(p.0)), ys.px(p.1));
                    }
                }
            }
            legend(&mut svg, &series.iter().map(|s| s.name.as_str()).collect::<Vec<_>>());
        }
        PlotData::Boxes { y_label, boxes } => {
            let ys = Scale::new(boxes.iter().flat_map(|b| [b.min, b.max, b.mean]), y_bottom, y_top, true);
            frame(&mut svg, &plot.title, &ys, y_label);
            let slot = (x1 - x0) / boxes.len().max(1) as f64;
            for (i, b) in boxes.iter().enumerate() {
                let cx = x0 + slot * (i as f64 + 0.5);
                let hw = (slot * 0.3).min(24.0);
                let _ = writeln!(svg, r##"<line x1="{cx:.2}" y1="{:.2}" x2="{cx:.2}" y2="{:.2}" stroke="#333333"/>"##, ys.px(b.min), ys.px(b.max));
                let (top, bottom) = (ys.px(b.q3), ys.px(b.q1));
                let _ = writeln!(svg, r##"<rect x="{:.2}" y="{top:.2}" width="{:.2}" height="{:.2}" fill="#9ecae1" stroke="#333333"/>"##, cx - hw, 2.0 * hw, (bottom - top).max(0.5));
                let m = ys.px(b.median);
                let _ = writeln!(svg, r##"<line x1="{:.2}" y1="{m:.2}" x2="{:.2}" y2="{m:.2}" stroke="#08306b" stroke-width="2"/>"##, cx - hw, cx + hw);
                let _ = writeln!(svg, r##"<circle cx="{cx:.2}" cy="{:.2}" r="3.5" fill="#d62728"/>"##, ys.px(b.mean));
                let ly = y_bottom + 14.0;
                let _ = writeln!(svg, r#"<text x="{cx:.2}" y="{ly}" transform="rotate(35 {cx:.2} {ly})" font-size="10">{}</text>"#, esc(&b.label));
            }
        }
        PlotData::Bars { y_label, categories, groups } => {
            let ys = Scale::new(groups.iter().flat_map(|g| g.points.iter().map(|p| p.1)), y_bottom, y_top, true);
            frame(&mut svg, &plot.title, &ys, y_label);
            let slot = (x1 - x0) / categories.len().max(1) as f64;
            let bw = slot * 0.8 / groups.len().max(1) as f64;
            let zero = ys.px(0.0);
            for (gi, g) in groups.iter().enumerate() {
                let c = PALETTE[gi % PALETTE.len()];
                for &(x, v) in &g.points {
                    let left = x0 + slot * (x + 0.1) + bw * gi as f64;
                    let y = ys.px(v);
                    let _ = writeln!(svg, r#"<rect x="{left:.2}" y="{:.2}" width="{bw:.2}" height="{:.2}" fill="{c}"/>"#, y.min(zero), (y - zero).abs().max(0.5));
                }
            }
            for (i, cat) in categories.iter().enumerate() {
                let cx = x0 + slot * (i as f64 + 0.5);
                let _ = writeln!(svg, r#"<text x="{cx:.2}" y="{}" text-anchor="middle" font-size="11">{}</text>"#, y_bottom + 16.0, esc(cat));
            }
            legend(&mut svg, &groups.iter().map(|s| s.name.as_str()).collect::<Vec<_>>());
        }
    }
    svg.push_str("</svg>\n");
    svg
}

/// Writes `<stem>.svg` and `<stem>.json` into `dir`.
pub fn write_plot(plot: &Plot, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
    let svg = dir.join(format!("{stem}.svg"));
    let json = dir.join(format!("{stem}.json"));
    fs::write(&svg, render_svg(plot))?;
    fs::write(&json, serde_json::to_string_pretty(plot)?)?;
    Ok((svg, json))
}
