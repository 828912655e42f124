//! Standalone SVG charts: accuracy against wall-clock time and stacked
//! per-iteration time breakdowns.

use std::fmt::Write as _;

use crate::experiment::{BreakdownReport, MetricRow, BREAKDOWN_HEADER};
use crate::HarnessError;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;
const PAD: f64 = 0.05;

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];
const DASHES: [&str; 6] = ["", "8 4", "2 3", "10 3 2 3", "4 4", "1 6"];
const STAGE_COLORS: [&str; 6] = ["#4c72b0", "#55a868", "#c44e52", "#8172b2", "#ccb974", "#64b5cd"];

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

/// Axis ranges: data min/max widened by 5% of the span on each side.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bounds {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

fn pad(lo: f64, hi: f64) -> (f64, f64) {
    let span = hi - lo;
    if span > 0.0 {
        (lo - PAD * span, hi + PAD * span)
    } else {
        // A single value still needs a visible range.
        let w = if lo != 0.0 { PAD * lo.abs() } else { PAD };
        (lo - w, hi + w)
    }
}

pub fn padded_bounds(series: &[Series]) -> Result<Bounds, HarnessError> {
    let mut pts = series.iter().flat_map(|s| s.points.iter()).peekable();
    if pts.peek().is_none() {
        return Err(HarnessError::Config("nothing to chart".into()));
    }
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    let (x_min, x_max) = pad(x0, x1);
    let (y_min, y_max) = pad(y0, y1);
    Ok(Bounds { x_min, x_max, y_min, y_max })
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn tick_label(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && !(1e-3..1e5).contains(&a) {
        format!("{v:.2e}")
    } else if a >= 100.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.3}")
    }
}

fn open_svg(out: &mut String, title: &str, b: Option<Bounds>) {
    let _ = write!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}""#);
    if let Some(b) = b {
        let _ = write!(out, r#" data-x-min="{}" data-x-max="{}" data-y-min="{}" data-y-max="{}""#, b.x_min, b.x_max, b.y_min, b.y_max);
    }
    out.push_str(">\n");
    let _ = writeln!(out, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="24" text-anchor="middle" font-family="sans-serif" font-size="16">{}</text>"#,
        LEFT + (WIDTH - LEFT - RIGHT) / 2.0,
        escape(title)
    );
}

fn axes(out: &mut String, b: &Bounds, x_label: &str, y_label: &str) {
    let (pw, ph) = (WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM);
    let _ = writeln!(out, r##"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="#333"/>"##);
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let x = LEFT + f * pw;
        let y = TOP + ph - f * ph;
        let xv = b.x_min + f * (b.x_max - b.x_min);
        let yv = b.y_min + f * (b.y_max - b.y_min);
        let _ = writeln!(out, r##"<line x1="{x}" y1="{}" x2="{x}" y2="{}" stroke="#333"/>"##, TOP + ph, TOP + ph + 5.0);
        let _ = writeln!(
            out,
            r#"<text x="{x}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="11">{}</text>"#,
            TOP + ph + 18.0,
            tick_label(xv)
        );
        let _ = writeln!(out, r##"<line x1="{}" y1="{y}" x2="{LEFT}" y2="{y}" stroke="#333"/>"##, LEFT - 5.0);
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="end" font-family="sans-serif" font-size="11">{}</text>"#,
            LEFT - 8.0,
            y + 4.0,
            tick_label(yv)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="13">{}</text>"#,
        LEFT + pw / 2.0,
        HEIGHT - 18.0,
        escape(x_label)
    );
    let _ = writeln!(
        out,
        r#"<text x="18" y="{}" text-anchor="middle" font-family="sans-serif" font-size="13" transform="rotate(-90 18 {})">{}</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0,
        escape(y_label)
    );
}

fn legend_entry(out: &mut String, i: usize, label: &str, swatch: &str) {
    let y = TOP + 12.0 + 20.0 * i as f64;
    let x = WIDTH - RIGHT + 15.0;
    out.push_str(&swatch.replace("{x}", &x.to_string()).replace("{x2}", &(x + 28.0).to_string()).replace("{y}", &y.to_string()));
    let _ = writeln!(
        out,
        r#"<text class="legend" x="{}" y="{}" font-family="sans-serif" font-size="12">{}</text>"#,
        x + 34.0,
        y + 4.0,
        escape(label)
    );
}

pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> Result<String, HarnessError> {
    let b = padded_bounds(series)?;
    let (pw, ph) = (WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM);
    let px = |x: f64| LEFT + (x - b.x_min) / (b.x_max - b.x_min) * pw;
    let py = |y: f64| TOP + ph - (y - b.y_min) / (b.y_max - b.y_min) * ph;
    let mut out = String::new();
    open_svg(&mut out, title, Some(b));
    axes(&mut out, &b, x_label, y_label);
    for (i, s) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let dash = DASHES[i % DASHES.len()];
        let dash_attr = if dash.is_empty() { String::new() } else { format!(r#" stroke-dasharray="{dash}""#) };
        let pts: Vec<String> = s.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
        let _ = writeln!(
            out,
            r#"<polyline class="series" data-label="{}" fill="none" stroke="{color}" stroke-width="2"{dash_attr} points="{}"/>"#,
            escape(&s.label),
            pts.join(" ")
        );
        for &(x, y) in &s.points {
            let _ = writeln!(out, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, px(x), py(y));
        }
        let swatch = format!(r#"<line x1="{{x}}" y1="{{y}}" x2="{{x2}}" y2="{{y}}" stroke="{color}" stroke-width="2"{dash_attr}/>"#) + "\n";
        legend_entry(&mut out, i, &s.label, &swatch);
    }
    out.push_str("</svg>\n");
    Ok(out)
}

/// Sampled evaluation accuracy against wall-clock seconds.
pub fn accuracy_series(label: &str, rows: &[MetricRow]) -> Series {
    Series {
        label: label.to_string(),
        points: rows.iter().filter_map(|r| r.eval_accuracy.map(|a| (r.wall_clock_ms / 1e3, a))).collect(),
    }
}

pub fn accuracy_chart(series: &[Series]) -> Result<String, HarnessError> {
    line_chart("Accuracy vs wall-clock time", "wall-clock time (s)", "accuracy", series)
}

const STAGES: [&str; 5] = ["update", "compute", "compress", "communicate", "idle"];

fn stage_values(b: &BreakdownReport) -> [f64; 5] {
    [b.update_s, b.compute_s, b.compress_s, b.communicate_s, b.idle_s]
}

/// One stacked bar per run: mean seconds per iteration by stage.
pub fn breakdown_chart(bars: &[(String, BreakdownReport)]) -> Result<String, HarnessError> {
    if bars.is_empty() {
        return Err(HarnessError::Config("nothing to chart".into()));
    }
    let top = bars.iter().map(|(_, b)| stage_values(b).iter().sum::<f64>().max(b.iteration_s)).fold(0.0, f64::max);
    let (y_min, y_max) = (0.0, if top > 0.0 { top * (1.0 + PAD) } else { 1.0 });
    let (pw, ph) = (WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM);
    let py = |y: f64| TOP + ph - (y - y_min) / (y_max - y_min) * ph;
    let mut out = String::new();
    open_svg(&mut out, "Time per iteration", None);
    let _ = writeln!(out, r##"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="#333"/>"##);
    for i in 0..=4 {
        let v = y_min + (y_max - y_min) * i as f64 / 4.0;
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="end" font-family="sans-serif" font-size="11">{}</text>"#,
            LEFT - 8.0,
            py(v) + 4.0,
            tick_label(v)
        );
    }
    let slot = pw / bars.len() as f64;
    let width = slot * 0.6;
    for (i, (label, report)) in bars.iter().enumerate() {
        let x = LEFT + slot * i as f64 + (slot - width) / 2.0;
        let mut acc = 0.0;
        for (stage, (v, color)) in STAGES.iter().zip(stage_values(report).iter().zip(STAGE_COLORS)) {
            let (y0, y1) = (py(acc), py(acc + v));
            let _ = writeln!(
                out,
                r#"<rect class="stage" data-stage="{stage}" data-run="{}" x="{x:.2}" y="{y1:.2}" width="{width:.2}" height="{:.2}" fill="{color}"/>"#,
                escape(label),
                y0 - y1
            );
            acc += v;
        }
        // Measured wall-clock time per iteration as a marker line.
        let y = py(report.iteration_s);
        let _ = writeln!(
            out,
            r##"<line class="iteration" x1="{:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#000" stroke-width="2" stroke-dasharray="4 2"/>"##,
            x - 4.0,
            x + width + 4.0
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12">{}</text>"#,
            x + width / 2.0,
            TOP + ph + 18.0,
            escape(label)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="18" y="{}" text-anchor="middle" font-family="sans-serif" font-size="13" transform="rotate(-90 18 {})">seconds per iteration</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0
    );
    for (i, (stage, color)) in STAGES.iter().zip(STAGE_COLORS).enumerate() {
        let swatch = format!(r#"<rect x="{{x}}" y="{{y}}" width="28" height="8" fill="{color}"/>"#) + "\n";
        legend_entry(&mut out, i, stage, &swatch);
    }
    legend_entry(
        &mut out,
        STAGES.len(),
        "wall-clock",
        "<line x1=\"{x}\" y1=\"{y}\" x2=\"{x2}\" y2=\"{y}\" stroke=\"#000\" stroke-width=\"2\" stroke-dasharray=\"4 2\"/>\n",
    );
    out.push_str("</svg>\n");
    Ok(out)
}

pub fn parse_breakdown_csv(text: &str) -> Result<Vec<BreakdownReport>, HarnessError> {
    let bad = |what: String| HarnessError::Config(format!("breakdown csv: {what}"));
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    if lines.next().map(str::trim) != Some(BREAKDOWN_HEADER) {
        return Err(bad("unexpected header".into()));
    }
    lines
        .map(|line| {
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 9 {
                return Err(bad(format!("expected 9 columns in {line:?}")));
            }
            let num = |i: usize| cols[i].parse::<f64>().map_err(|e| bad(format!("{}: {e}", cols[i])));
            Ok(BreakdownReport {
                mode: cols[0].parse().map_err(|e| bad(format!("{e}")))?,
                update_s: num(1)?,
                compute_s: num(2)?,
                compress_s: num(3)?,
                communicate_s: num(4)?,
                idle_s: num(5)?,
                overlapped_comm_s: num(6)?,
                iteration_s: num(7)?,
                final_accuracy: num(8)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn padding_is_five_percent() {
        let s = Series { label: "a".into(), points: vec![(0.0, 0.5), (10.0, 0.9)] };
        let b = padded_bounds(&[s]).unwrap();
        assert!((b.x_min + 0.5).abs() < 1e-12 && (b.x_max - 10.5).abs() < 1e-12);
        assert!((b.y_min - 0.48).abs() < 1e-12 && (b.y_max - 0.92).abs() < 1e-12);
    }

    #[test]
    fn single_point_and_empty() {
        let s = Series { label: "x".into(), points: vec![(2.0, 0.0)] };
        let svg = line_chart("t", "x", "y", &[s]).unwrap();
        assert!(svg.contains("<polyline") && svg.ends_with("</svg>\n"));
        assert!(padded_bounds(&[Series { label: "e".into(), points: vec![] }]).is_err());
        assert!(breakdown_chart(&[]).is_err());
    }

    #[test]
    fn labels_are_escaped() {
        let s = Series { label: "a<b>&".into(), points: vec![(0.0, 1.0), (1.0, 2.0)] };
        let svg = line_chart("t", "x", "y", &[s]).unwrap();
        assert!(svg.contains("a&lt;b&gt;&amp;") && !svg.contains("a<b>"));
    }
}
