//! Deterministic SVG line and bar charts from long-format CSV
//! (`series,x,y` plus an optional `label` column).
//!
//! Data coordinates map to pixels by the affine transform of [`Frame`]:
//!
//! ```text
//! px = LEFT + (x - x_min) / (x_max - x_min) * PLOT_W
//! py = TOP  + (y_max - y) / (y_max - y_min) * PLOT_H
//! ```
//!
//! A degenerate range `[v, v]` is widened to `[v - 0.5, v + 0.5]`. Bar
//! charts place category `i` of `n` at `LEFT + (i + 0.5) * PLOT_W / n` and
//! always include `y = 0` in the range. Every plotted mark carries its
//! source values in `data-series`, `data-x` and `data-y` attributes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Read;

use serde::Deserialize;

use crate::error::{Error, Result};

pub const WIDTH: f64 = 640.0;
pub const HEIGHT: f64 = 400.0;
pub const LEFT: f64 = 64.0;
pub const TOP: f64 = 24.0;
pub const PLOT_W: f64 = 420.0;
pub const PLOT_H: f64 = 320.0;

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlotKind {
    Line,
    Bar,
}

impl PlotKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "line" => Ok(Self::Line),
            "bar" => Ok(Self::Bar),
            other => Err(Error::config(format!(
                "unknown plot kind {other:?}; expected line or bar"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct Point {
    pub series: String,
    #[serde(default)]
    pub label: Option<String>,
    pub x: f64,
    pub y: f64,
}

/// Reads long-format points. Extra columns are ignored.
pub fn read_points(reader: impl Read) -> Result<Vec<Point>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut points = Vec::new();
    for rec in rdr.deserialize() {
        let p: Point = rec?;
        if !p.x.is_finite() || !p.y.is_finite() {
            return Err(Error::data(format!(
                "non-finite point in series {:?}",
                p.series
            )));
        }
        points.push(p);
    }
    if points.is_empty() {
        return Err(Error::data("plot input has no data rows"));
    }
    Ok(points)
}

/// Data range and its pixel mapping.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Frame {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

fn widen(lo: f64, hi: f64) -> (f64, f64) {
    if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, hi + 0.5)
    }
}

impl Frame {
    pub fn fit(points: &[Point], include_zero: bool) -> Self {
        let fold = |f: fn(&Point) -> f64| {
            points
                .iter()
                .map(f)
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                    (lo.min(v), hi.max(v))
                })
        };
        let (x_min, x_max) = widen(fold(|p| p.x).0, fold(|p| p.x).1);
        let (mut y_lo, mut y_hi) = fold(|p| p.y);
        if include_zero {
            y_lo = y_lo.min(0.0);
            y_hi = y_hi.max(0.0);
        }
        let (y_min, y_max) = widen(y_lo, y_hi);
        Self {
            x_min,
            x_max,
            y_min,
            y_max,
        }
    }

    pub fn px(&self, x: f64) -> f64 {
        LEFT + (x - self.x_min) / (self.x_max - self.x_min) * PLOT_W
    }

    pub fn py(&self, y: f64) -> f64 {
        TOP + (self.y_max - y) / (self.y_max - self.y_min) * PLOT_H
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Series names in order of first appearance.
fn series_order(points: &[Point]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for p in points {
        if !out.contains(&p.series) {
            out.push(p.series.clone());
        }
    }
    out
}

pub fn render_svg(points: &[Point], kind: PlotKind, title: &str) -> Result<String> {
    if points.is_empty() {
        return Err(Error::data("nothing to plot"));
    }
    let frame = Frame::fit(points, kind == PlotKind::Bar);
    let series = series_order(points);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(
        s,
        r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.3}" y="16" text-anchor="middle" font-size="13">{}</text>"#,
        LEFT + PLOT_W / 2.0,
        escape(title)
    );
    axes(&mut s, &frame);

    match kind {
        PlotKind::Line => {
            let _ = writeln!(s, r#"<g class="x-ticks">"#);
            let mut xs: Vec<(f64, String)> = points
                .iter()
                .map(|p| (p.x, p.label.clone().unwrap_or_else(|| p.x.to_string())))
                .collect();
            xs.sort_by(|a, b| a.0.total_cmp(&b.0));
            xs.dedup_by(|a, b| a.0 == b.0);
            for (x, label) in &xs {
                tick_x(&mut s, frame.px(*x), label);
            }
            let _ = writeln!(s, "</g>");
            for (k, name) in series.iter().enumerate() {
                let color = PALETTE[k % PALETTE.len()];
                let mut pts: Vec<&Point> = points.iter().filter(|p| &p.series == name).collect();
                pts.sort_by(|a, b| a.x.total_cmp(&b.x));
                let path: Vec<String> = pts
                    .iter()
                    .map(|p| format!("{:.3},{:.3}", frame.px(p.x), frame.py(p.y)))
                    .collect();
                let _ = writeln!(s, r#"<g class="series" data-series="{}">"#, escape(name));
                let _ = writeln!(
                    s,
                    r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
                    path.join(" ")
                );
                for p in pts {
                    let _ = writeln!(
                        s,
                        r#"<circle class="point" cx="{:.3}" cy="{:.3}" r="3" fill="{color}" data-series="{}" data-x="{}" data-y="{}"/>"#,
                        frame.px(p.x),
                        frame.py(p.y),
                        escape(name),
                        p.x,
                        p.y
                    );
                }
                let _ = writeln!(s, "</g>");
            }
        }
        PlotKind::Bar => {
            let mut cats: BTreeMap<u64, (f64, String)> = BTreeMap::new();
            for p in points {
                let key = order_key(p.x);
                cats.entry(key)
                    .or_insert_with(|| (p.x, p.label.clone().unwrap_or_else(|| p.x.to_string())));
            }
            let index: BTreeMap<u64, usize> =
                cats.keys().enumerate().map(|(i, &k)| (k, i)).collect();
            let slot = PLOT_W / cats.len() as f64;
            let bar_w = slot * 0.8 / series.len() as f64;
            let _ = writeln!(s, r#"<g class="x-ticks">"#);
            for (i, (_, label)) in cats.values().enumerate() {
                tick_x(&mut s, LEFT + (i as f64 + 0.5) * slot, label);
            }
            let _ = writeln!(s, "</g>");
            let base = frame.py(0.0);
            for (k, name) in series.iter().enumerate() {
                let color = PALETTE[k % PALETTE.len()];
                let _ = writeln!(s, r#"<g class="series" data-series="{}">"#, escape(name));
                for p in points.iter().filter(|p| &p.series == name) {
                    let i = index[&order_key(p.x)];
                    let x0 = LEFT + i as f64 * slot + slot * 0.1 + k as f64 * bar_w;
                    let top = frame.py(p.y);
                    let _ = writeln!(
                        s,
                        r#"<rect class="bar" x="{:.3}" y="{:.3}" width="{:.3}" height="{:.3}" fill="{color}" data-series="{}" data-x="{}" data-y="{}"/>"#,
                        x0,
                        top.min(base),
                        bar_w,
                        (top - base).abs(),
                        escape(name),
                        p.x,
                        p.y
                    );
                }
                let _ = writeln!(s, "</g>");
            }
        }
    }

    let _ = writeln!(s, r#"<g class="legend">"#);
    let lx = LEFT + PLOT_W + 20.0;
    for (k, name) in series.iter().enumerate() {
        let y = TOP + 10.0 + 18.0 * k as f64;
        let color = PALETTE[k % PALETTE.len()];
        let _ = writeln!(
            s,
            r#"<g class="legend-entry"><rect x="{lx:.3}" y="{:.3}" width="10" height="10" fill="{color}"/><text x="{:.3}" y="{:.3}">{}</text></g>"#,
            y - 9.0,
            lx + 14.0,
            y,
            escape(name)
        );
    }
    let _ = writeln!(s, "</g>");
    s.push_str("</svg>\n");
    Ok(s)
}

/// Total-order key of a finite float, so equal x values share a category.
fn order_key(x: f64) -> u64 {
    let bits = x.to_bits();
    if bits >> 63 == 1 {
        !bits
    } else {
        bits | (1 << 63)
    }
}

fn tick_x(s: &mut String, px: f64, label: &str) {
    let y = TOP + PLOT_H;
    let _ = writeln!(
        s,
        r#"<line x1="{px:.3}" y1="{y:.3}" x2="{px:.3}" y2="{:.3}" stroke="black"/><text x="{px:.3}" y="{:.3}" text-anchor="middle">{}</text>"#,
        y + 4.0,
        y + 16.0,
        escape(label)
    );
}

fn axes(s: &mut String, f: &Frame) {
    let (x0, y0, x1, y1) = (LEFT, TOP, LEFT + PLOT_W, TOP + PLOT_H);
    let _ = writeln!(
        s,
        r#"<g class="axes" stroke="black"><line x1="{x0:.3}" y1="{y1:.3}" x2="{x1:.3}" y2="{y1:.3}"/><line x1="{x0:.3}" y1="{y0:.3}" x2="{x0:.3}" y2="{y1:.3}"/></g>"#
    );
    let _ = writeln!(s, r#"<g class="y-ticks">"#);
    for i in 0..=4 {
        let v = f.y_min + (f.y_max - f.y_min) * i as f64 / 4.0;
        let py = f.py(v);
        let _ = writeln!(
            s,
            r#"<line x1="{:.3}" y1="{py:.3}" x2="{x0:.3}" y2="{py:.3}" stroke="black"/><text x="{:.3}" y="{:.3}" text-anchor="end">{v:.3}</text>"#,
            x0 - 4.0,
            x0 - 6.0,
            py + 4.0
        );
    }
    let _ = writeln!(s, "</g>");
}
